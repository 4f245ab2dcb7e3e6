"""Desk-scale end-to-end experiment on the procedural corpus.

One run = build corpus + external unknown sources -> five-fold CV -> fold ensemble on eval1/eval2 ->
five-class confidence-threshold baseline -> soft pseudo-labels on the test
splits -> retrained ensemble.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import datagen, pipeline
from .augment import AugmentConfig
from .dataset import UNKNOWN, Dataset, featurize
from .dsp import PRESET_DURATIONS, PRESETS, SpecConfig
from .evaluation import evaluate, weighted_eval
from .nn import TrainConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    n_per_class: int = 100
    n_eval_per_class: int = 30
    spec_preset: str = "toy"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=15, batch_size=32))
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    folds: int = 5
    n_external_per_source: int = 100

    @property
    def spec(self) -> SpecConfig:
        return PRESETS[self.spec_preset]

    @property
    def duration_s(self) -> float:
        return PRESET_DURATIONS[self.spec_preset]


def eval1_accuracy(probs: np.ndarray, ds: Dataset, pred=None) -> float:
    """0.7 x clean-part accuracy + 0.3 x weak-part accuracy."""
    pred = probs.argmax(axis=1) if pred is None else pred
    truth = ds.targets()
    parts = np.array([e.part for e in ds])
    acc = {p: float(np.mean(pred[parts == p] == truth[parts == p])) for p in ("clean", "weak")}
    return weighted_eval(acc["clean"], acc["weak"])


def accuracy(probs: np.ndarray, ds: Dataset, pred=None) -> float:
    pred = probs.argmax(axis=1) if pred is None else pred
    return float(np.mean(pred == ds.targets()))


def run(seed: int, cfg: ExperimentConfig = ExperimentConfig()) -> dict:
    t0 = time.time()
    corpus = datagen.build_corpus(cfg.n_per_class, seed, cfg.n_eval_per_class, cfg.duration_s)
    external = datagen.build_external_unknown(cfg.n_external_per_source, seed, cfg.duration_s)
    held_out = set(corpus.eval_unknown)
    if any(e.family in held_out for src in external for e in src):
        raise ValueError("external unknown sources overlap the held-out evaluation families")
    known = corpus.train.where(lambda e: e.target != UNKNOWN)
    provided = corpus.train.where(lambda e: e.target == UNKNOWN)
    train = pipeline.assemble_unknown(known, [provided, *external])
    train = featurize(train, cfg.spec, cfg.duration_s, seed)
    eval1 = featurize(corpus.eval1, cfg.spec, cfg.duration_s, seed)
    eval2 = featurize(corpus.eval2, cfg.spec, cfg.duration_s, seed)
    tcfg = TrainConfig(**{**cfg.train.__dict__, "seed": seed})
    out: dict = {"seed": seed}

    cv = pipeline.cross_validate(train, tcfg, cfg.augment, cfg.spec, cfg.folds)
    out["cv_macro_f1"] = cv.mean_macro_f1
    out["cv_checksum"] = cv.checksum()

    member_p1 = [pipeline.predict_proba([m], eval1) for m in cv.models]
    member_p2 = [pipeline.predict_proba([m], eval2) for m in cv.models]
    out["member_eval1"] = [eval1_accuracy(p, eval1) for p in member_p1]
    out["member_eval2"] = [accuracy(p, eval2) for p in member_p2]
    ens_p1 = sum(member_p1) / len(member_p1)
    ens_p2 = sum(member_p2) / len(member_p2)
    out["ensemble_eval1"] = eval1_accuracy(ens_p1, eval1)
    out["ensemble_eval2"] = accuracy(ens_p2, eval2)
    out["ensemble_eval1_macro_f1"] = evaluate(ens_p1.argmax(axis=1), eval1.targets()).macro_f1

    # five-class baseline on the same training partition as fold model 0
    tr0 = cv.split.train_idx(0)
    base = pipeline.train_known_only(train, tr0, tcfg, cfg.augment, cfg.spec,
                                     seed=pipeline.derive_seed(seed, 0))
    bp1 = pipeline.predict_proba([base], eval1)
    bp2 = pipeline.predict_proba([base], eval2)
    sweep = {tau: eval1_accuracy(bp1, eval1, pipeline.threshold_predict(bp1, tau)) for tau in pipeline.TAU_GRID}
    best_tau = max(sweep, key=lambda t: (sweep[t], -t))
    out["baseline_eval1_by_tau"] = sweep
    out["baseline_best_tau"] = best_tau
    out["baseline_eval1"] = sweep[best_tau]
    out["baseline_eval2"] = accuracy(bp2, eval2, pipeline.threshold_predict(bp2, best_tau))
    out["sixclass_eval1"] = out["member_eval1"][0]
    out["sixclass_eval2"] = out["member_eval2"][0]

    # one round of soft pseudo-labeling on the unlabeled test splits
    test = eval1 + eval2
    soft = pipeline.pseudo_label(cv.models, test)
    pseudo = [(e.spec, p) for e, p in zip(test, soft)]
    re = pipeline.retrain_with_pseudo(train, pseudo, tcfg, cfg.augment, cfg.spec, cfg.folds,
                                      ids=[f"pseudo_{e.id}" for e in test])
    out["retrain_eval1"] = eval1_accuracy(pipeline.predict_proba(re.models, eval1), eval1)
    out["retrain_eval2"] = accuracy(pipeline.predict_proba(re.models, eval2), eval2)
    out["seconds"] = time.time() - t0
    log.info("seed %d done in %.1fs", seed, out["seconds"])
    return out
