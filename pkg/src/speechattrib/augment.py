"""Spectrogram and label-space augmentations."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.fft import dctn, idctn

from .dsp import MelSpec

LABEL_TOL = 1e-6

# ITU-T T.81 Annex K luminance table
JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass(frozen=True)
class LabeledExample:
    spec: MelSpec
    label: np.ndarray

    def __post_init__(self):
        label = np.asarray(self.label, dtype=np.float64)
        if label.ndim != 1 or np.any(label < 0) or abs(label.sum() - 1.0) > LABEL_TOL:
            raise ValueError(f"label must be a probability vector, got {label}")
        object.__setattr__(self, "label", label)


@dataclass(frozen=True)
class AugmentConfig:
    mixup_alpha: float = 2.5
    mixup_beta: float = 2.5
    noise_sigma_max: float = 0.5
    mask_max_time: int = 6
    mask_max_freq: int = 4
    jpeg_quality_range: tuple[int, int] = (75, 95)
    p_mixup: float = 0.5
    p_cutmix: float = 0.5
    p_noise: float = 0.5
    p_mask: float = 0.5
    p_jpeg: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "jpeg_quality_range", tuple(int(q) for q in self.jpeg_quality_range))
        if self.mixup_alpha <= 0 or self.mixup_beta <= 0:
            raise ValueError("Beta shape parameters must be positive")
        if self.noise_sigma_max < 0 or self.mask_max_time < 0 or self.mask_max_freq < 0:
            raise ValueError("noise and mask bounds must be non-negative")
        lo, hi = self.jpeg_quality_range
        if not (1 <= lo <= hi <= 100):
            raise ValueError(f"bad jpeg_quality_range {self.jpeg_quality_range}")
        for name in ("p_mixup", "p_cutmix", "p_noise", "p_mask", "p_jpeg"):
            if not (0.0 <= getattr(self, name) <= 1.0):
                raise ValueError(f"{name} must be in [0, 1]")

    @classmethod
    def disabled(cls, **overrides) -> "AugmentConfig":
        kw = dict(p_mixup=0.0, p_cutmix=0.0, p_noise=0.0, p_mask=0.0, p_jpeg=0.0)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["jpeg_quality_range"] = list(self.jpeg_quality_range)
        return d


def _check_pair(a: LabeledExample, b: LabeledExample):
    if a.spec.shape != b.spec.shape:
        raise ValueError(f"spectrogram shapes differ: {a.spec.shape} vs {b.spec.shape}")


def mixup(a: LabeledExample, b: LabeledExample, lam: float) -> LabeledExample:
    _check_pair(a, b)
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    if lam == 1.0:
        return a
    spec = MelSpec(lam * a.spec.values + (1.0 - lam) * b.spec.values, a.spec.config)
    return LabeledExample(spec, lam * a.label + (1.0 - lam) * b.label)


def cutmix_box(a: LabeledExample, b: LabeledExample, top: int, left: int,
               height: int, width: int) -> LabeledExample:
    """Paste b's [top:top+height, left:left+width] region into a; labels mix by area."""
    _check_pair(a, b)
    n_rows, n_cols = a.spec.shape
    if not (0 <= top and 0 <= left and 0 <= height and 0 <= width
            and top + height <= n_rows and left + width <= n_cols):
        raise ValueError("box outside the spectrogram")
    values = a.spec.values.copy()
    values[top:top + height, left:left + width] = b.spec.values[top:top + height, left:left + width]
    rho = height * width / (n_rows * n_cols)
    return LabeledExample(MelSpec(values, a.spec.config), (1.0 - rho) * a.label + rho * b.label)


def cutmix(a: LabeledExample, b: LabeledExample, rng: np.random.Generator,
           alpha: float = 2.5, beta: float = 2.5) -> LabeledExample:
    _check_pair(a, b)
    n_rows, n_cols = a.spec.shape
    rho = rng.beta(alpha, beta)
    side = np.sqrt(rho)
    height = int(round(side * n_rows))
    width = int(round(side * n_cols))
    top = int(rng.integers(0, n_rows - height + 1))
    left = int(rng.integers(0, n_cols - width + 1))
    return cutmix_box(a, b, top, left, height, width)


def gaussian_noise(spec: MelSpec, sigma: float, rng: np.random.Generator) -> MelSpec:
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return spec
    return MelSpec(spec.values + rng.normal(0.0, sigma, size=spec.shape), spec.config)


def time_freq_mask(spec: MelSpec, cfg: AugmentConfig, rng: np.random.Generator) -> MelSpec:
    """One time band and one mel band, each filled with the spectrogram mean."""
    n_mels, n_frames = spec.shape
    if cfg.mask_max_time >= n_frames or cfg.mask_max_freq >= n_mels:
        raise ValueError(f"mask bounds ({cfg.mask_max_freq}, {cfg.mask_max_time}) too large for {spec.shape}")
    t = int(rng.integers(0, cfg.mask_max_time + 1))
    f = int(rng.integers(0, cfg.mask_max_freq + 1))
    t0 = int(rng.integers(0, n_frames - t + 1))
    f0 = int(rng.integers(0, n_mels - f + 1))
    if t == 0 and f == 0:
        return spec
    values = spec.values.copy()
    fill = spec.values.mean()
    values[:, t0:t0 + t] = fill
    values[f0:f0 + f, :] = fill
    return MelSpec(values, spec.config)


def quant_table(quality: int) -> np.ndarray:
    """IJG quality scaling of the luminance table."""
    if not (1 <= quality <= 100):
        raise ValueError(f"quality must be in [1, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((JPEG_LUMA * scale + 50.0) / 100.0), 1, 255)


def jpeg_degrade(spec: MelSpec, quality: int) -> MelSpec:
    """Round-trip through 8-bit block-DCT quantization, as a baseline JPEG codec would."""
    table = quant_table(quality)
    x = spec.values
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0:
        return MelSpec(x.copy(), spec.config)
    pix = np.round((x - lo) * (255.0 / (hi - lo)))
    n_rows, n_cols = x.shape
    pr, pc = -n_rows % 8, -n_cols % 8
    pix = np.pad(pix, ((0, pr), (0, pc)), mode="edge") - 128.0
    br, bc = pix.shape[0] // 8, pix.shape[1] // 8
    blocks = pix.reshape(br, 8, bc, 8).transpose(0, 2, 1, 3)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / table) * table
    rec = idctn(coef, axes=(-2, -1), norm="ortho").transpose(0, 2, 1, 3).reshape(pix.shape)
    rec = np.clip(np.round(rec + 128.0), 0, 255)[:n_rows, :n_cols]
    return MelSpec(lo + rec * ((hi - lo) / 255.0), spec.config)


def augment_batch(specs: np.ndarray, labels: np.ndarray, cfg: AugmentConfig,
                  rng: np.random.Generator, spec_cfg=None):
    """Apply the training-time augmentation chain to a batch of raw arrays.

    Order per example: mixup or cutmix (partner drawn from the unaugmented
    batch) -> gaussian noise -> time/frequency mask -> JPEG.
    """
    out_x = np.empty(specs.shape, dtype=np.float64)
    out_y = np.empty(labels.shape, dtype=np.float64)
    n = len(specs)
    originals = [LabeledExample(MelSpec(s, spec_cfg), y) for s, y in zip(specs, labels)]
    for i, ex in enumerate(originals):
        do_mix = rng.random() < cfg.p_mixup
        do_cut = rng.random() < cfg.p_cutmix
        if do_mix and do_cut:
            do_mix = rng.random() < 0.5
            do_cut = not do_mix
        if (do_mix or do_cut) and n > 1:
            partner = originals[int(rng.integers(0, n))]
            if do_mix:
                ex = mixup(ex, partner, float(rng.beta(cfg.mixup_alpha, cfg.mixup_beta)))
            else:
                ex = cutmix(ex, partner, rng, cfg.mixup_alpha, cfg.mixup_beta)
        spec = ex.spec
        if rng.random() < cfg.p_noise:
            spec = gaussian_noise(spec, float(rng.uniform(0, cfg.noise_sigma_max)), rng)
        if rng.random() < cfg.p_mask:
            spec = time_freq_mask(spec, cfg, rng)
        if rng.random() < cfg.p_jpeg:
            lo, hi = cfg.jpeg_quality_range
            spec = jpeg_degrade(spec, int(rng.integers(lo, hi + 1)))
        out_x[i] = spec.values
        out_y[i] = ex.label
    return out_x, out_y
