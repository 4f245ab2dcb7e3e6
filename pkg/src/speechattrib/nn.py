"""Compact CNN classifier with hand-written backprop, Adam and LR decay.

Layout is NHWC throughout: a batch of spectrograms (B, n_mels, n_frames)
becomes (B, H, W, 1). Each block is 3x3 same-padded conv -> ReLU -> 2x2
max-pool; a global average pool feeds one dense layer.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

N_CLASSES = 6
DEFAULT_CHANNELS = (16, 32, 64, 128)
FORMAT_TAG = b"SATTRCNN"
FORMAT_VERSION = 1
PROB_CLIP = 1e-15


@dataclass
class ModelParams:
    channels: tuple[int, ...]
    n_classes: int
    conv_w: list[np.ndarray]  # (3, 3, c_in, c_out)
    conv_b: list[np.ndarray]
    fc_w: np.ndarray  # (c_last, n_classes)
    fc_b: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in declaration order."""
        out = []
        for w, b in zip(self.conv_w, self.conv_b):
            out += [w, b]
        return out + [self.fc_w, self.fc_b]

    @classmethod
    def from_arrays(cls, channels, n_classes, arrays) -> "ModelParams":
        arrays = list(arrays)
        n = len(channels)
        return cls(tuple(channels), n_classes, arrays[0:2 * n:2], arrays[1:2 * n:2], arrays[-2], arrays[-1])

    def map(self, fn) -> "ModelParams":
        return ModelParams.from_arrays(self.channels, self.n_classes, [fn(a) for a in self.arrays()])

    @property
    def dtype(self):
        return self.fc_w.dtype

    @property
    def min_input(self) -> int:
        return 2 ** len(self.channels)

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_model(seed: int, channels=DEFAULT_CHANNELS, n_classes: int = N_CLASSES,
               dtype=np.float32) -> ModelParams:
    """He-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    conv_w, conv_b = [], []
    c_in = 1
    for c_out in channels:
        limit = np.sqrt(6.0 / (9 * c_in))
        conv_w.append(rng.uniform(-limit, limit, size=(3, 3, c_in, c_out)).astype(dtype))
        conv_b.append(np.zeros(c_out, dtype=dtype))
        c_in = c_out
    limit = np.sqrt(6.0 / c_in)
    fc_w = rng.uniform(-limit, limit, size=(c_in, n_classes)).astype(dtype)
    return ModelParams(tuple(channels), n_classes, conv_w, conv_b, fc_w, np.zeros(n_classes, dtype=dtype))


# ---------------------------------------------------------------------------
# layers: each forward returns (output, cache); each backward takes the cache

def conv_forward(x, w, b):
    bsz, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate([xp[:, i:i + h, j:j + wd, :] for i in range(3) for j in range(3)], axis=-1)
    wm = w.reshape(9 * c, -1)
    out = cols.reshape(-1, 9 * c) @ wm + b
    return out.reshape(bsz, h, wd, -1), (cols, w)


def conv_backward(dout, cache, need_dx=True):
    cols, w = cache
    bsz, h, wd, k = cols.shape
    c = k // 9
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = (cols.reshape(-1, k).T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(k, -1).T).reshape(bsz, h, wd, k)
    dxp = np.zeros((bsz, h + 2, wd + 2, c), dtype=dout.dtype)
    for n, (i, j) in enumerate((i, j) for i in range(3) for j in range(3)):
        dxp[:, i:i + h, j:j + wd, :] += dcols[..., n * c:(n + 1) * c]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def maxpool_forward(x):
    """2x2 max-pool, stride 2; odd trailing rows/cols are dropped.

    Ties route the gradient to the first maximal cell in (0,0), (0,1),
    (1,0), (1,1) order.
    """
    bsz, h, wd, c = x.shape
    h2, w2 = 2 * (h // 2), 2 * (wd // 2)
    quads = [x[:, i:h2:2, j:w2:2, :] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    masks, taken = [], np.zeros(out.shape, dtype=bool)
    for q in quads[:3]:
        m = (q == out) & ~taken
        taken |= m
        masks.append(m)
    masks.append(~taken)
    return out, (masks, x.shape)


def maxpool_backward(dout, cache):
    masks, shape = cache
    bsz, h, wd, c = shape
    h2, w2 = 2 * (h // 2), 2 * (wd // 2)
    dx = np.zeros(shape, dtype=dout.dtype)
    for m, (i, j) in zip(masks, ((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, i:h2:2, j:w2:2, :] = dout * m
    return dx


def gap_forward(x):
    return x.mean(axis=(1, 2)), x.shape


def gap_backward(dout, shape):
    bsz, h, wd, c = shape
    return np.broadcast_to(dout[:, None, None, :] / (h * wd), shape).copy()


def dense_forward(x, w, b):
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def smooth_labels(labels, alpha: float):
    labels = np.asarray(labels, dtype=np.float64)
    return (1.0 - alpha) * labels + alpha / labels.shape[-1]


def softmax_ce_forward(logits, labels, alpha):
    """Mean label-smoothed cross-entropy over the batch, from raw logits."""
    target = smooth_labels(labels, alpha)
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    loss = float(-(target * logp).sum(axis=1).mean())
    return loss, (np.exp(logp), target)


def softmax_ce_backward(cache):
    probs, target = cache
    return (probs - target) / probs.shape[0]


# ---------------------------------------------------------------------------

def as_batch(batch) -> np.ndarray:
    """Stack a list of MelSpec or 2-D arrays into an (B, H, W, 1) array."""
    if isinstance(batch, np.ndarray):
        arr = batch
    else:
        arr = np.stack([getattr(s, "values", s) for s in batch])
    if arr.ndim == 3:
        arr = arr[..., None]
    return arr


def _check_input(params: ModelParams, x: np.ndarray):
    if x.ndim != 4 or x.shape[-1] != 1:
        raise ValueError(f"expected a batch of 2-D spectrograms, got array of shape {x.shape}")
    if min(x.shape[1], x.shape[2]) < params.min_input:
        raise ValueError(f"spatial dims {x.shape[1:3]} too small for {len(params.channels)} pooling stages "
                         f"(need >= {params.min_input})")


def forward_logits(params: ModelParams, batch, keep_cache=False):
    x = as_batch(batch).astype(params.dtype, copy=False)
    _check_input(params, x)
    caches = []
    for w, b in zip(params.conv_w, params.conv_b):
        x, cc = conv_forward(x, w, b)
        x, rc = relu_forward(x)
        x, pc = maxpool_forward(x)
        if keep_cache:
            caches.append((cc, rc, pc))
    g, gc = gap_forward(x)
    logits, dc = dense_forward(g, params.fc_w, params.fc_b)
    return logits, ((caches, gc, dc) if keep_cache else None)


def forward(params: ModelParams, batch) -> np.ndarray:
    """Softmax class probabilities, shape (B, n_classes), float64.

    Entries are clipped into [1e-15, 1 - 1e-15] so they never hit 0 or 1
    exactly; the row sums move by at most n_classes * 1e-15.
    """
    logits, _ = forward_logits(params, batch)
    p = np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))
    return np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)


def predict_proba(params: ModelParams, batch, chunk: int = 64) -> np.ndarray:
    x = as_batch(batch)
    return np.concatenate([forward(params, x[i:i + chunk]) for i in range(0, len(x), chunk)])


def smoothed_cce(probs, label, alpha: float) -> float:
    """-sum_k y~_k log p_k with y~ = (1 - alpha) y + alpha / K."""
    probs = np.asarray(probs, dtype=np.float64)
    target = smooth_labels(label, alpha)
    return float(-(target * np.log(probs)).sum(axis=-1).mean())


def backward(params: ModelParams, batch, labels, alpha: float):
    """Mean smoothed-CE loss over the batch, its gradient, and the batch probabilities."""
    logits, (caches, gc, dc) = forward_logits(params, batch, keep_cache=True)
    loss, sc = softmax_ce_forward(logits, labels, alpha)
    dlogits = softmax_ce_backward(sc).astype(params.dtype)
    dg, dfc_w, dfc_b = dense_backward(dlogits, dc)
    dx = gap_backward(dg, gc)
    dws, dbs = [], []
    for i in reversed(range(len(caches))):
        cc, rc, pc = caches[i]
        dx = maxpool_backward(dx, pc)
        dx = relu_backward(dx, rc)
        dx, dw, db = conv_backward(dx, cc, need_dx=i > 0)
        dws.append(dw)
        dbs.append(db)
    grads = ModelParams(params.channels, params.n_classes, dws[::-1], dbs[::-1], dfc_w, dfc_b)
    return loss, grads, sc[0]


def chunked_gradients(params: ModelParams, batch, labels, alpha: float, n_chunks: int):
    """Data-parallel form of backward: per-chunk gradients combined by size-weighted sum."""
    x = as_batch(batch)
    labels = np.asarray(labels)
    parts = np.array_split(np.arange(len(x)), n_chunks)
    total, acc = 0.0, None
    for idx in parts:
        if len(idx) == 0:
            continue
        loss, g, _ = backward(params, x[idx], labels[idx], alpha)
        wgt = len(idx) / len(x)
        total += wgt * loss
        g = g.map(lambda a: a * wgt)
        acc = g if acc is None else ModelParams.from_arrays(
            params.channels, params.n_classes, [a + b for a, b in zip(acc.arrays(), g.arrays())])
    return total, acc


# ---------------------------------------------------------------------------
# optimization

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    decay_rate: float = 0.9
    label_smoothing: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 60
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.decay_rate <= 1):
            raise ValueError("decay_rate must be in (0, 1]")
        if not (0 <= self.label_smoothing < 1):
            raise ValueError("label_smoothing must be in [0, 1)")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must be in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()], [np.zeros_like(a) for a in params.arrays()])


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (new params, new state)."""
    p_arr, g_arr = params.arrays(), grads.arrays()
    if len(p_arr) != len(g_arr) or any(p.shape != g.shape for p, g in zip(p_arr, g_arr)):
        raise ValueError("gradient shapes do not match parameter shapes")
    t = state.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arr, g_arr, state.m, state.v):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p.append((p - step).astype(p.dtype, copy=False))
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))
    return (ModelParams.from_arrays(params.channels, params.n_classes, new_p),
            AdamState(new_m, new_v, t))


def lr_schedule(gamma1: float, decay_rate: float, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return gamma1 * decay_rate ** epoch


# ---------------------------------------------------------------------------
# serialization

def dumps(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    arch = json.dumps({"channels": list(params.channels), "n_classes": params.n_classes}).encode()
    buf.write(FORMAT_TAG)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(arch)))
    buf.write(arch)
    arrays = params.arrays()
    buf.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> ModelParams:
    if data[:len(FORMAT_TAG)] != FORMAT_TAG:
        raise ValueError("not a model file")
    pos = len(FORMAT_TAG)
    version, n_arch = struct.unpack_from("<II", data, pos)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    pos += 8
    arch = json.loads(data[pos:pos + n_arch])
    pos += n_arch
    (n_arrays,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = []
    for _ in range(n_arrays):
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays.append(np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32))
        pos += 4 * count
    return ModelParams.from_arrays(arch["channels"], arch["n_classes"], arrays)


def save_model(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(params))


def load_model(path) -> ModelParams:
    with open(path, "rb") as fh:
        return loads(fh.read())
