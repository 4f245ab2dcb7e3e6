"""Labeled example containers shared by the corpus generator and the training pipeline."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .audio_io import AudioClip, random_segment, resample, z_normalize
from .dsp import MelSpec, SpecConfig, transform

N_CLASSES = 6
UNKNOWN = 5
KNOWN_SOURCES = tuple(f"known-{k}" for k in range(5))
UNKNOWN_SOURCE = "unknown-external"
PSEUDO_SOURCE = "pseudo"
LABEL_TOL = 1e-6


def one_hot(k: int, n: int = N_CLASSES) -> np.ndarray:
    v = np.zeros(n)
    v[k] = 1.0
    return v


def check_label(label, n: int = N_CLASSES) -> np.ndarray:
    label = np.asarray(label, dtype=np.float64)
    if label.shape != (n,) or np.any(label < 0) or abs(label.sum() - 1.0) > LABEL_TOL:
        raise ValueError(f"label is not on the {n}-simplex: {label}")
    return label


@dataclass
class Example:
    id: str
    label: np.ndarray
    source: str
    clip: AudioClip | None = None
    spec: MelSpec | None = None
    family: int | None = None
    split: str = "train"
    part: str = ""
    tags: tuple[str, ...] = ()

    def __post_init__(self):
        self.label = check_label(self.label)

    @property
    def target(self) -> int:
        return int(np.argmax(self.label))


@dataclass
class Dataset:
    examples: list[Example] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def subset(self, idx: Iterable[int]) -> "Dataset":
        return Dataset([self.examples[i] for i in idx])

    def where(self, pred) -> "Dataset":
        return Dataset([e for e in self.examples if pred(e)])

    def __add__(self, other: "Dataset") -> "Dataset":
        return Dataset(self.examples + other.examples)

    def labels(self) -> np.ndarray:
        return np.stack([e.label for e in self.examples]) if self.examples else np.zeros((0, N_CLASSES))

    def targets(self) -> np.ndarray:
        return np.array([e.target for e in self.examples], dtype=np.int64)

    def histogram(self) -> list[int]:
        return np.bincount(self.targets(), minlength=N_CLASSES).tolist()

    def spec_array(self) -> np.ndarray:
        if any(e.spec is None for e in self.examples):
            raise ValueError("dataset has examples without spectrograms; call featurize first")
        return np.stack([e.spec.values for e in self.examples])


def example_rng(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(key.encode())])


def prepare_clip(clip: AudioClip, cfg: SpecConfig, duration_s: float, rng) -> AudioClip:
    """Resample -> Z-normalize -> random fixed-length segment."""
    clip = z_normalize(resample(clip, cfg.sample_rate))
    return random_segment(clip, duration_s, rng)


def featurize(ds: Dataset, cfg: SpecConfig, duration_s: float, seed: int = 0) -> Dataset:
    """Attach a log-mel spectrogram to every example that carries a clip."""
    out = []
    for e in ds:
        if e.clip is None:
            if e.spec is None:
                raise ValueError(f"example {e.id} has neither clip nor spectrogram")
            out.append(e)
            continue
        clip = prepare_clip(e.clip, cfg, duration_s, example_rng(seed, e.id))
        out.append(replace(e, spec=transform(clip, cfg)))
    return Dataset(out)
