"""Six-class training pipeline: folds, training, ensembling, pseudo-labels, threshold baseline."""
from __future__ import annotations

import csv
import hashlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .augment import AugmentConfig, augment_batch
from .dataset import (KNOWN_SOURCES, N_CLASSES, PSEUDO_SOURCE, UNKNOWN, UNKNOWN_SOURCE, Dataset,
                      Example, check_label, one_hot)
from .dsp import MelSpec, SpecConfig
from .evaluation import MetricsReport, evaluate, write_confusion_csv
from .nn import ModelParams, TrainConfig

log = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-6
TAU_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class FoldSplit:
    """fold id per example; -1 marks examples that are always in the training partition."""
    assignment: np.ndarray
    k: int

    def train_idx(self, fold_id: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold_id)

    def val_idx(self, fold_id: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold_id)


def assemble_unknown(known: Dataset, unknown_sources: list[Dataset]) -> Dataset:
    """Known classes 0-4 plus every unknown-source example relabeled as class 5."""
    for e in known:
        if e.label[UNKNOWN] > 0 or e.source not in KNOWN_SOURCES:
            raise ValueError(f"example {e.id} in the known set is not one of classes 0-4")
    out = list(known.examples)
    for src in unknown_sources:
        out += [replace(e, label=one_hot(UNKNOWN), source=UNKNOWN_SOURCE) for e in src]
    return Dataset(out)


def make_folds(ds: Dataset, k: int = 5, seed: int = 0) -> FoldSplit:
    """Stratified by argmax label; pseudo-labeled examples get fold -1."""
    rng = np.random.default_rng([seed, 0xF01D])
    assignment = np.full(len(ds), -1, dtype=np.int64)
    strat = np.array([e.source != PSEUDO_SOURCE for e in ds], dtype=bool)
    targets = ds.targets() if len(ds) else np.zeros(0, dtype=np.int64)
    offset = 0
    for cls in range(N_CLASSES):
        idx = np.flatnonzero(strat & (targets == cls))
        if len(idx) == 0:
            continue
        if len(idx) < k:
            raise ValueError(f"class {cls} has {len(idx)} examples, fewer than k={k}")
        idx = rng.permutation(idx)
        assignment[idx] = (offset + np.arange(len(idx))) % k
        offset = (offset + len(idx)) % k
    return FoldSplit(assignment, k)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def check_simplex(probs: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    if not (np.all(probs > 0) and np.all(probs < 1) and np.allclose(probs.sum(axis=1), 1.0, atol=tol)):
        raise AssertionError("model output left the probability simplex")


def train_model(x: np.ndarray, y: np.ndarray, train_cfg: TrainConfig, aug_cfg: AugmentConfig | None,
                seed: int, spec_cfg: SpecConfig | None = None, n_classes: int = N_CLASSES,
                channels=nn.DEFAULT_CHANNELS) -> ModelParams:
    """Mini-batch Adam on the mean smoothed cross-entropy, with per-epoch exponential LR decay."""
    rng = np.random.default_rng([seed, 1])
    params = nn.init_model(derive_seed(seed, 2), channels=channels, n_classes=n_classes)
    state = nn.AdamState.zeros(params)
    n = len(x)
    for epoch in range(train_cfg.epochs):
        lr = nn.lr_schedule(train_cfg.learning_rate, train_cfg.decay_rate, epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            xb, yb = x[idx], y[idx]
            if aug_cfg is not None:
                xb, yb = augment_batch(xb, yb, aug_cfg, rng, spec_cfg)
            loss, grads, probs = nn.backward(params, xb, yb, train_cfg.label_smoothing)
            params, state = nn.adam_step(params, grads, state, lr, train_cfg.adam_beta1,
                                         train_cfg.adam_beta2, train_cfg.adam_eps)
            total += loss * len(idx)
        check_simplex(np.clip(probs, nn.PROB_CLIP, 1 - nn.PROB_CLIP))
        log.debug("epoch %d lr %.3g loss %.4f", epoch, lr, total / max(n, 1))
    return params


def predict_proba(models: list[ModelParams], specs) -> np.ndarray:
    """Mean of per-model softmax outputs, shape (B, n_classes)."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    x = nn.as_batch(specs) if not isinstance(specs, Dataset) else nn.as_batch(specs.spec_array())
    probs = sum(nn.predict_proba(m, x) for m in models) / len(models)
    return probs


def ensemble_predict(models: list[ModelParams], spec: MelSpec) -> np.ndarray:
    return predict_proba(models, [spec])[0]


def evaluate_models(models: list[ModelParams], ds: Dataset) -> MetricsReport:
    probs = predict_proba(models, ds)
    return evaluate(probs.argmax(axis=1), ds.targets())


def train_fold(ds: Dataset, split: FoldSplit, fold_id: int, train_cfg: TrainConfig,
               aug_cfg: AugmentConfig | None, spec_cfg: SpecConfig | None = None):
    """Train on every fold but ``fold_id`` and report metrics on the held-out fold."""
    if not (0 <= fold_id < split.k):
        raise ValueError(f"fold_id {fold_id} outside 0..{split.k - 1}")
    tr, va = split.train_idx(fold_id), split.val_idx(fold_id)
    x = ds.spec_array()
    y = ds.labels()
    model = train_model(x[tr], y[tr], train_cfg, aug_cfg, derive_seed(train_cfg.seed, fold_id), spec_cfg)
    report = evaluate_models([model], ds.subset(va))
    return model, report


def _train_fold_job(args):
    return train_fold(*args)


@dataclass
class CVResult:
    models: list[ModelParams]
    reports: list[MetricsReport]
    split: FoldSplit

    @property
    def mean_macro_f1(self) -> float:
        return float(np.mean([r.macro_f1 for r in self.reports]))

    def report_text(self) -> str:
        lines = [f"fold_{k}_macro_f1: {r.macro_f1!r}\nfold_{k}_accuracy: {r.accuracy!r}\n"
                 for k, r in enumerate(self.reports)]
        return "".join(lines) + f"mean_macro_f1: {self.mean_macro_f1!r}\n"

    def checksum(self) -> str:
        return hashlib.sha256(self.report_text().encode()).hexdigest()


def cross_validate(ds: Dataset, train_cfg: TrainConfig, aug_cfg: AugmentConfig | None,
                   spec_cfg: SpecConfig | None = None, k: int = 5, split: FoldSplit | None = None,
                   workers: int = 1) -> CVResult:
    """k fold models; with workers > 1 the folds train in separate processes."""
    split = split or make_folds(ds, k, train_cfg.seed)
    jobs = [(ds, split, f, train_cfg, aug_cfg, spec_cfg) for f in range(split.k)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_fold_job, jobs))
    else:
        results = [_train_fold_job(j) for j in jobs]
    for f, (_, r) in enumerate(results):
        log.debug("fold %d: macro F1 %.4f, accuracy %.4f", f, r.macro_f1, r.accuracy)
    return CVResult([m for m, _ in results], [r for _, r in results], split)


def pseudo_label(models: list[ModelParams], unlabeled) -> list[np.ndarray]:
    """Soft ensemble labels, no thresholding or hardening; one ensemble_predict call per spectrogram."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    if isinstance(unlabeled, Dataset):
        unlabeled = [e.spec for e in unlabeled]
    return [ensemble_predict(models, s) for s in unlabeled]


def with_pseudo(ds: Dataset, pseudo: list[tuple[MelSpec, np.ndarray]], ids=None) -> Dataset:
    extra = []
    for i, (spec, label) in enumerate(pseudo):
        label = check_label(label)
        pid = ids[i] if ids is not None else f"pseudo_{i:05d}"
        extra.append(Example(pid, label, PSEUDO_SOURCE, spec=spec, split="pseudo"))
    return ds + Dataset(extra)


def retrain_with_pseudo(ds: Dataset, pseudo: list[tuple[MelSpec, np.ndarray]], train_cfg: TrainConfig,
                        aug_cfg: AugmentConfig | None, spec_cfg: SpecConfig | None = None,
                        k: int = 5, ids=None, workers: int = 1) -> CVResult:
    """Append pseudo examples (unit weight) to every training partition and retrain the fold models.

    The labeled examples keep the same fold assignment as a plain CV run
    with the same seed, so held-out reports stay comparable.
    """
    base = make_folds(ds, k, train_cfg.seed)
    combined = with_pseudo(ds, pseudo, ids)
    assignment = np.concatenate([base.assignment, np.full(len(pseudo), -1, dtype=np.int64)])
    return cross_validate(combined, train_cfg, aug_cfg, spec_cfg, k, FoldSplit(assignment, k), workers)


def baseline_threshold_predict(model: ModelParams, spec, tau: float) -> int:
    return int(threshold_predict(nn.predict_proba(model, [spec]), tau)[0])


def threshold_predict(probs: np.ndarray, tau: float) -> np.ndarray:
    """argmax over the known classes if its probability reaches tau, else class 5."""
    if not (0.0 < tau < 1.0):
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    probs = np.asarray(probs)
    return np.where(probs.max(axis=1) >= tau, probs.argmax(axis=1), UNKNOWN)


def train_known_only(ds: Dataset, idx, train_cfg: TrainConfig, aug_cfg: AugmentConfig | None,
                     spec_cfg: SpecConfig | None = None, seed: int = 0) -> ModelParams:
    """Five-class model for the threshold baseline, trained on the known examples among ``idx``."""
    idx = [i for i in idx if ds[i].target != UNKNOWN and ds[i].source != PSEUDO_SOURCE]
    x = ds.spec_array()[idx]
    y = ds.labels()[idx][:, :UNKNOWN]
    return train_model(x, y, train_cfg, aug_cfg, seed, spec_cfg, n_classes=UNKNOWN)


# ---------------------------------------------------------------------------
# run directory I/O

def model_paths(run_dir) -> list[str]:
    names = sorted(f for f in os.listdir(run_dir) if f.endswith(".model"))
    return [os.path.join(run_dir, f) for f in names]


def load_models(run_dir) -> list[ModelParams]:
    paths = model_paths(run_dir)
    if not paths:
        raise FileNotFoundError(f"no model files in {run_dir}")
    return [nn.load_model(p) for p in paths]


def save_cv(result: CVResult, run_dir) -> str:
    os.makedirs(run_dir, exist_ok=True)
    for k, (m, r) in enumerate(zip(result.models, result.reports)):
        nn.save_model(m, os.path.join(run_dir, f"fold_{k}.model"))
        with open(os.path.join(run_dir, f"fold_{k}_metrics.txt"), "w", encoding="utf-8") as fh:
            fh.write(r.to_text())
        write_confusion_csv(r.confusion, os.path.join(run_dir, f"fold_{k}_confusion.csv"))
    path = os.path.join(run_dir, "cv_report.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(result.report_text())
    return path


PROB_COLUMNS = [f"p{k}" for k in range(N_CLASSES)]


def write_prob_csv(path, ids, probs, with_pred=False) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + (["predicted"] if with_pred else []) + PROB_COLUMNS)
        for i, p in zip(ids, probs):
            pred = [int(np.argmax(p))] if with_pred else []
            w.writerow([i] + pred + [repr(float(v)) for v in p])


def read_prob_csv(path):
    ids, probs, preds = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["id"])
            probs.append([float(row[c]) for c in PROB_COLUMNS])
            if "predicted" in row:
                preds.append(int(row["predicted"]))
    return ids, np.array(probs), (np.array(preds) if preds else None)
