"""Command-line entry point: gen, train, pseudo, retrain, infer, eval.

Every subcommand reads one YAML run configuration (``--config``). Data goes
to files; progress and warnings go to stderr.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import yaml

from . import datagen, pipeline
from .audio_io import WavError, load_wav
from .augment import AugmentConfig
from .dataset import KNOWN_SOURCES, UNKNOWN, UNKNOWN_SOURCE, Dataset, Example, featurize, one_hot
from .dsp import PRESET_DURATIONS, PRESETS, SpecConfig
from .evaluation import evaluate, parse_report, weighted_eval, write_confusion_csv
from .nn import TrainConfig

log = logging.getLogger("speechattrib")

CONFIG_SNAPSHOT = "config.yaml"
PSEUDO_CSV = "pseudo_labels.csv"
PREDICTIONS_CSV = "predictions.csv"
RETRAIN_DIR = "retrained"
EXTERNAL_DIR = "external"
EXTERNAL_MANIFEST = "external_manifest.csv"


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSettings:
    dir: str = "corpus"
    n_per_class: int = 100
    n_eval_per_class: int = 30
    n_external_per_source: int = 100
    duration_s: float | None = None


@dataclass
class RunConfig:
    spec: SpecConfig
    train: TrainConfig
    augment: AugmentConfig
    corpus: CorpusSettings
    duration_s: float
    seed: int = 0
    folds: int = 5
    ensemble: list[str] = field(default_factory=list)
    output_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str = ".") -> "RunConfig":
        raw = dict(raw or {})
        unknown = set(raw) - {"spec_preset", "spec", "train", "augment", "corpus", "seed", "folds",
                              "ensemble", "output_dir", "duration_s"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            preset = raw.get("spec_preset", "toy")
            if preset not in PRESETS:
                raise ConfigError(f"spec_preset must be one of {sorted(PRESETS)}, got {preset!r}")
            spec = replace(PRESETS[preset], **raw.get("spec", {}) or {})
            train = TrainConfig(**(raw.get("train") or {}))
            aug_raw = dict(raw.get("augment") or {})
            if "jpeg_quality_range" in aug_raw:
                aug_raw["jpeg_quality_range"] = tuple(aug_raw["jpeg_quality_range"])
            augment = AugmentConfig(**aug_raw)
            corpus = CorpusSettings(**(raw.get("corpus") or {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        seed = int(raw.get("seed", 0))
        train = replace(train, seed=seed)
        duration = raw.get("duration_s") or corpus.duration_s or PRESET_DURATIONS[preset]
        resolve = lambda p: p if os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))
        corpus.dir = resolve(corpus.dir)
        cfg = cls(spec, train, augment, corpus, float(duration), seed,
                  int(raw.get("folds", 5)), [resolve(p) for p in raw.get("ensemble", []) or []],
                  resolve(raw.get("output_dir", "runs/default")))
        cfg.validate()
        return cfg

    def validate(self):
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        if self.corpus.n_per_class < 10:
            raise ConfigError(f"corpus.n_per_class must be >= 10, got {self.corpus.n_per_class}")
        if self.corpus.n_eval_per_class < 2 or self.corpus.n_external_per_source < 0:
            raise ConfigError("corpus.n_eval_per_class must be >= 2 and n_external_per_source >= 0")

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        return {
            "spec_preset": next((k for k, v in PRESETS.items() if v == self.spec), "toy"),
            "spec": self.spec.to_dict(),
            "train": asdict(self.train),
            "augment": self.augment.to_dict(),
            "corpus": asdict(self.corpus),
            "duration_s": self.duration_s,
            "seed": self.seed,
            "folds": self.folds,
            "ensemble": list(self.ensemble),
            "output_dir": self.output_dir,
        }


def load_config(path) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return RunConfig.from_dict(raw or {}, os.path.dirname(os.path.abspath(path)))


def save_snapshot(cfg: RunConfig, run_dir) -> None:
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, CONFIG_SNAPSHOT), "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


# ---------------------------------------------------------------------------
# loading audio from disk

def _wav_files(input_dir) -> list[str]:
    if not os.path.isdir(input_dir):
        raise ConfigError(f"input directory not found: {input_dir}")
    return sorted(f for f in os.listdir(input_dir) if f.lower().endswith(".wav"))


def _source_tag(cls: int) -> str:
    return UNKNOWN_SOURCE if cls == UNKNOWN else KNOWN_SOURCES[cls]


def _manifest_dataset(root, manifest, split) -> Dataset:
    if not os.path.isfile(manifest):
        raise ConfigError(f"manifest not found: {manifest} (run `gen` first)")
    out = []
    for row in datagen.read_manifest(manifest):
        if row["split"] != split:
            continue
        cls = row["class_id"]
        name = os.path.splitext(os.path.basename(row["filename"]))[0]
        out.append(Example(name, one_hot(cls), _source_tag(cls), clip=load_wav(os.path.join(root, row["filename"])),
                           family=row["family_id"], split=split, part=row["part"]))
    return Dataset(out)


def load_training_set(cfg: RunConfig) -> Dataset:
    root = cfg.corpus.dir
    train = _manifest_dataset(root, os.path.join(root, "manifest.csv"), "train")
    if not len(train):
        raise ConfigError(f"no training examples in {root}")
    ext_manifest = os.path.join(root, EXTERNAL_DIR, EXTERNAL_MANIFEST)
    sources = []
    if os.path.isfile(ext_manifest):
        ext = _manifest_dataset(os.path.join(root, EXTERNAL_DIR), ext_manifest, "external")
        sources = [ext]
    known = train.where(lambda e: e.target != UNKNOWN)
    provided = train.where(lambda e: e.target == UNKNOWN)
    ds = pipeline.assemble_unknown(known, [provided, *sources])
    return featurize(ds, cfg.spec, cfg.duration_s, cfg.seed)


def load_unlabeled(cfg: RunConfig, input_dir) -> Dataset:
    names = _wav_files(input_dir)
    if not names:
        raise ConfigError(f"no .wav files in {input_dir}")
    out = []
    for name in names:
        # the label is a placeholder; these examples only ever feed inference
        out.append(Example(name, one_hot(0), KNOWN_SOURCES[0], clip=load_wav(os.path.join(input_dir, name)),
                           split="unlabeled"))
    return featurize(Dataset(out), cfg.spec, cfg.duration_s, cfg.seed)


def ensemble_models(cfg: RunConfig, run_dir):
    models = pipeline.load_models(run_dir)
    for extra in cfg.ensemble:
        models += pipeline.load_models(extra)
    return models


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(cfg: RunConfig, args) -> int:
    c = cfg.corpus
    corpus = datagen.build_corpus(c.n_per_class, cfg.seed, c.n_eval_per_class, cfg.duration_s)
    path = datagen.write_corpus(corpus, c.dir)
    external = datagen.build_external_unknown(c.n_external_per_source, cfg.seed, cfg.duration_s)
    ext_dir = os.path.join(c.dir, EXTERNAL_DIR)
    ext_path = datagen.write_corpus(
        datagen.Corpus(sum(external, Dataset()), Dataset(), Dataset()), ext_dir, manifest=EXTERNAL_MANIFEST)
    log.info("wrote %d clips, manifest %s; %d external clips, manifest %s",
             len(corpus.all()), path, sum(len(s) for s in external), ext_path)
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    run_dir = args.run_dir or cfg.output_dir
    ds = load_training_set(cfg)
    log.info("training %d folds on %d examples (histogram %s)", cfg.folds, len(ds), ds.histogram())
    cv = pipeline.cross_validate(ds, cfg.train, cfg.augment, cfg.spec, cfg.folds, workers=args.threads)
    save_snapshot(cfg, run_dir)
    _clear_models(run_dir)
    pipeline.save_cv(cv, run_dir)
    for k, r in enumerate(cv.reports):
        print(f"fold {k}: macro F1 {r.macro_f1:.4f}", file=sys.stderr)
    print(f"mean macro F1 {cv.mean_macro_f1:.4f}", file=sys.stderr)
    return 0


def cmd_pseudo(cfg: RunConfig, args) -> int:
    run_dir = args.run_dir or cfg.output_dir
    input_dir = _require(args.input_dir, "--input-dir")
    models = ensemble_models(cfg, run_dir)
    ds = load_unlabeled(cfg, input_dir)
    soft = pipeline.pseudo_label(models, ds)
    out = args.output or os.path.join(run_dir, PSEUDO_CSV)
    pipeline.write_prob_csv(out, [e.id for e in ds], soft)
    log.info("wrote %d soft labels to %s", len(ds), out)
    return 0


def cmd_retrain(cfg: RunConfig, args) -> int:
    run_dir = args.run_dir or cfg.output_dir
    input_dir = _require(args.input_dir, "--input-dir")
    pseudo_csv = args.pseudo or os.path.join(run_dir, PSEUDO_CSV)
    if not os.path.isfile(pseudo_csv):
        raise ConfigError(f"pseudo-label CSV not found: {pseudo_csv} (run `pseudo` first)")
    ids, soft, _ = pipeline.read_prob_csv(pseudo_csv)
    unlabeled = {e.id: e for e in load_unlabeled(cfg, input_dir)}
    missing = [i for i in ids if i not in unlabeled]
    if missing:
        raise ConfigError(f"{len(missing)} pseudo-labeled files not found in {input_dir}, e.g. {missing[0]}")
    ds = load_training_set(cfg)
    pseudo = [(unlabeled[i].spec, p) for i, p in zip(ids, soft)]
    out_dir = args.output or os.path.join(run_dir, RETRAIN_DIR)
    re = pipeline.retrain_with_pseudo(ds, pseudo, cfg.train, cfg.augment, cfg.spec, cfg.folds,
                                      ids=[f"pseudo_{i}" for i in ids], workers=args.threads)
    save_snapshot(cfg, out_dir)
    _clear_models(out_dir)
    pipeline.save_cv(re, out_dir)
    print(f"retrained mean macro F1 {re.mean_macro_f1:.4f}", file=sys.stderr)
    return 0


def cmd_infer(cfg: RunConfig, args) -> int:
    run_dir = args.run_dir or cfg.output_dir
    input_dir = _require(args.input_dir, "--input-dir")
    models = ensemble_models(cfg, run_dir)
    ds = load_unlabeled(cfg, input_dir)
    probs = pipeline.predict_proba(models, ds)
    out = args.output or os.path.join(run_dir, PREDICTIONS_CSV)
    write_predictions(out, [e.id for e in ds], probs)
    log.info("%d models, %d files -> %s", len(models), len(ds), out)
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    pred_csv = _require(args.predictions, "--predictions")
    manifest = _require(args.manifest, "--manifest")
    if not os.path.isfile(pred_csv):
        raise ConfigError(f"predictions file not found: {pred_csv}")
    names, preds, _ = read_predictions(pred_csv)
    truth = {os.path.basename(r["filename"]): r for r in datagen.read_manifest(manifest)}
    missing = [n for n in names if n not in truth]
    if missing:
        raise ConfigError(f"{len(missing)} predictions have no manifest row, e.g. {missing[0]}")
    rows = [truth[n] for n in names]
    y = np.array([r["class_id"] for r in rows])
    parts = np.array([r["part"] for r in rows])
    lines = evaluate(preds, y).to_text()
    part_acc = {}
    for part in sorted(set(parts)):
        m = parts == part
        rep = evaluate(preds[m], y[m])
        lines += rep.to_text(prefix=f"{part}_")
        part_acc[part] = rep.accuracy
    if "clean" in part_acc and "weak" in part_acc:
        lines += f"weighted_score: {weighted_eval(part_acc['clean'], part_acc['weak'])!r}\n"
    else:
        log.warning("Part II (weakly perturbed) predictions missing; weighted score omitted")
    out = args.output or os.path.splitext(pred_csv)[0] + "_metrics.txt"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(lines)
    write_confusion_csv(evaluate(preds, y).confusion, os.path.splitext(out)[0] + "_confusion.csv")
    log.info("metrics -> %s", out)
    return 0


# ---------------------------------------------------------------------------

PRED_HEADER = ["filename", "predicted"] + pipeline.PROB_COLUMNS


def write_predictions(path, names, probs) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(PRED_HEADER)
        for n, p in zip(names, probs):
            w.writerow([n, int(np.argmax(p))] + [repr(float(v)) for v in p])


def read_predictions(path):
    names, preds, probs = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PRED_HEADER:
            raise ConfigError(f"unexpected predictions header {reader.fieldnames}")
        for row in reader:
            names.append(row["filename"])
            preds.append(int(row["predicted"]))
            probs.append([float(row[c]) for c in pipeline.PROB_COLUMNS])
    return names, np.array(preds, dtype=np.int64), np.array(probs)


def parse_report_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_report(fh.read())


def _require(value, flag):
    if not value:
        raise ConfigError(f"{flag} is required for this command")
    return value


def _clear_models(run_dir):
    if os.path.isdir(run_dir):
        for f in os.listdir(run_dir):
            if f.endswith(".model"):
                os.remove(os.path.join(run_dir, f))


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "pseudo": cmd_pseudo,
    "retrain": cmd_retrain,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="speechattrib", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--run-dir", help="run directory (default: output_dir from the config)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, default=1, help="worker processes for fold training")
    p.add_argument("--input-dir", help="directory of WAV files (pseudo, retrain, infer)")
    p.add_argument("--pseudo", help="pseudo-label CSV for retrain (default: <run-dir>/pseudo_labels.csv)")
    p.add_argument("--predictions", help="predictions CSV for eval")
    p.add_argument("--manifest", help="corpus manifest CSV for eval")
    p.add_argument("--output", help="output path override")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s", force=True)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, WavError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
