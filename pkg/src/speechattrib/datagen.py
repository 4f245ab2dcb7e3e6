"""Procedural stand-in corpus: parametric generator families and evaluation perturbations.

Known families 0-4 have fixed parameter tables. Unknown families (id >= 5)
are drawn from a broad parameter space seeded by the family id, so disjoint
id ranges give disjoint "unseen algorithm" sets for training and evaluation.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal

from .audio_io import AudioClip, resample_ratio, write_wav
from .dataset import KNOWN_SOURCES, UNKNOWN, UNKNOWN_SOURCE, Dataset, Example, one_hot

SAMPLE_RATE = 16000
PEAK = 0.9
NATURAL_FAMILY = 5
SHARED_SPEAKER_FAMILY = 6
TRAIN_UNKNOWN = tuple(range(5, 25))
EVAL_UNKNOWN = tuple(range(100, 120))
# extra unknown-class sources standing in for external corpora; two sources of 20 families each
EXTERNAL_UNKNOWN = (tuple(range(200, 220)), tuple(range(220, 240)))

# speaker pitch ranges in Hz
SPEAKERS = {
    "shared": (100.0, 140.0),
    "disjoint": (190.0, 240.0),
    "wide": (80.0, 300.0),
}

WEAK_P = (0.5, 0.5, 0.5)
STRONG_P = (0.5, 0.5, 0.5)
SNR_RANGE = (15.0, 30.0)
RT60_RANGE = (0.1, 0.4)
SEMITONE_RANGE = (-2.0, 2.0)
STRETCH_RANGE = (0.85, 1.15)
LOWPASS_RANGE = (3000.0, 7000.0)
HIGHPASS_RANGE = (100.0, 400.0)


@dataclass(frozen=True)
class GeneratorSpec:
    family: int
    harmonics: int
    tilt_db_oct: float
    vibrato_rate: float
    vibrato_cents: float
    formants: tuple[float, ...]
    am_rate: float
    noise_mix: float
    speaker: str = "shared"

    def __post_init__(self):
        if self.harmonics < 0 or not (0.0 <= self.noise_mix <= 1.0):
            raise ValueError("invalid harmonic count or noise mix")
        if self.harmonics == 0 and self.noise_mix < 1.0:
            raise ValueError("a family without harmonics must be fully noise-excited")
        if self.speaker not in SPEAKERS:
            raise ValueError(f"unknown speaker group {self.speaker!r}")
        if any(not (0 < f < SAMPLE_RATE / 2) for f in self.formants):
            raise ValueError("formant centers must lie inside (0, Nyquist)")


KNOWN_FORMANTS = (650.0, 1500.0, 2700.0)

KNOWN_FAMILIES = {
    0: GeneratorSpec(0, 20, -6.0, 5.0, 30.0, KNOWN_FORMANTS, 3.0, 0.05, "disjoint"),
    1: GeneratorSpec(1, 8, -3.0, 0.0, 0.0, KNOWN_FORMANTS, 5.0, 0.10, "shared"),
    2: GeneratorSpec(2, 30, -9.0, 7.0, 60.0, KNOWN_FORMANTS, 0.0, 0.30, "shared"),
    3: GeneratorSpec(3, 15, -4.0, 3.0, 20.0, KNOWN_FORMANTS, 9.0, 0.0, "shared"),
    4: GeneratorSpec(4, 40, -2.0, 0.0, 0.0, KNOWN_FORMANTS, 1.5, 0.50, "wide"),
}


def family_spec(family: int) -> GeneratorSpec:
    if family in KNOWN_FAMILIES:
        return KNOWN_FAMILIES[family]
    if family < 5:
        raise ValueError(f"invalid family id {family}")
    rng = np.random.default_rng([family, 7919])
    formants = (rng.uniform(250, 900), rng.uniform(900, 2300), rng.uniform(2300, 4200))
    kw = dict(
        harmonics=int(rng.integers(4, 46)),
        tilt_db_oct=float(rng.uniform(-10, -1)),
        vibrato_rate=float(rng.uniform(0, 8)),
        vibrato_cents=float(rng.uniform(0, 80)),
        formants=tuple(float(f) for f in formants),
        am_rate=float(rng.uniform(0, 10)),
        noise_mix=float(rng.uniform(0, 0.6)),
        speaker=str(rng.choice(list(SPEAKERS))),
    )
    if family == NATURAL_FAMILY:
        # noise-excited formant source with no harmonic stack
        kw.update(harmonics=0, noise_mix=1.0, vibrato_rate=0.0, vibrato_cents=0.0, am_rate=4.0)
    elif family == SHARED_SPEAKER_FAMILY:
        kw.update(speaker="shared")
    return GeneratorSpec(family, **kw)


def distinguishing_fields(a: GeneratorSpec, b: GeneratorSpec) -> int:
    """How many of {harmonics, vibrato rate, formants, AM rate, noise mix} differ."""
    return sum([
        a.harmonics != b.harmonics,
        a.vibrato_rate != b.vibrato_rate,
        a.formants != b.formants,
        a.am_rate != b.am_rate,
        a.noise_mix != b.noise_mix,
    ])


def _resonator_bank(x: np.ndarray, formants, sr: int) -> np.ndarray:
    y = np.zeros_like(x)
    for i, fc in enumerate(formants):
        bw = max(60.0, 0.08 * fc)
        b, a = signal.iirpeak(fc, fc / bw, fs=sr)
        y += signal.lfilter(b, a, x) / (i + 1)
    return y


def gen_sample(spec: GeneratorSpec, duration_s: float, rng: np.random.Generator,
               sr: int = SAMPLE_RATE) -> AudioClip:
    """One clip of a generator family; per-sample jitter on pitch, rates and formants."""
    if duration_s <= 0:
        raise ValueError(f"duration_s must be positive, got {duration_s}")
    n = int(round(duration_s * sr))
    t = np.arange(n) / sr
    f0 = rng.uniform(*SPEAKERS[spec.speaker])
    vib_rate = spec.vibrato_rate * rng.uniform(0.8, 1.2)
    vib_cents = spec.vibrato_cents * rng.uniform(0.7, 1.3)
    am_rate = spec.am_rate * rng.uniform(0.8, 1.2)
    formants = [f * rng.uniform(0.9, 1.1) for f in spec.formants]
    tilt = spec.tilt_db_oct + rng.uniform(-2.0, 2.0)
    mix = float(np.clip(spec.noise_mix + rng.uniform(-0.1, 0.1), 0.0, 1.0)) if spec.harmonics else 1.0

    noise = rng.normal(size=n)
    if spec.harmonics:
        f_inst = f0 * 2.0 ** (vib_cents / 1200.0 * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi)))
        phase = 2 * np.pi * np.cumsum(f_inst) / sr
        ks = np.arange(1, spec.harmonics + 1)
        ks = ks[ks * f0 * 1.05 < sr / 2]
        amps = 10.0 ** (tilt * np.log2(ks) / 20.0)
        offsets = rng.uniform(0, 2 * np.pi, size=len(ks))
        voiced = (amps[:, None] * np.sin(ks[:, None] * phase[None, :] + offsets[:, None])).sum(axis=0)
        voiced /= np.sqrt(np.mean(voiced ** 2)) + 1e-12
        excitation = (1.0 - mix) * voiced + mix * noise
    else:
        excitation = noise
    y = 0.3 * excitation + _resonator_bank(excitation, formants, sr)
    if am_rate > 0:
        y *= 1.0 + 0.6 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    y *= PEAK / (np.max(np.abs(y)) + 1e-12)
    return AudioClip(y, sr)


# ---------------------------------------------------------------------------
# perturbations

def _renorm(x: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(x)) if len(x) else 0.0
    return x / peak if peak > 1.0 else x


def add_noise(x: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    p_signal = np.mean(x ** 2)
    return x + rng.normal(0.0, np.sqrt(p_signal / 10.0 ** (snr_db / 10.0)), size=len(x))


def mu_law_roundtrip(x: np.ndarray, mu: float = 255.0, bits: int = 8) -> np.ndarray:
    x = np.clip(x, -1.0, 1.0)
    y = np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)
    levels = 2 ** bits - 1
    y = np.round((y + 1.0) / 2.0 * levels) / levels * 2.0 - 1.0
    return np.sign(y) * ((1.0 + mu) ** np.abs(y) - 1.0) / mu


def reverb(x: np.ndarray, sr: int, rt60: float, rng: np.random.Generator) -> np.ndarray:
    """Convolve with a noise-tail impulse response decaying 60 dB over rt60 seconds."""
    n_ir = max(1, int(rt60 * sr))
    t = np.arange(n_ir) / sr
    ir = rng.normal(size=n_ir) * np.exp(-6.908 * t / rt60) * 0.1
    ir[0] = 1.0
    return signal.fftconvolve(x, ir)[:len(x)]


def time_stretch(x: np.ndarray, factor: float, frame: int = 512, hop: int = 256, tolerance: int = 128,
                 n_out: int | None = None) -> np.ndarray:
    """WSOLA time stretch: output is ``factor`` times longer, pitch unchanged.

    Each analysis frame may shift by up to ``tolerance`` samples from its
    nominal position to best continue the waveform already written.
    """
    if factor <= 0:
        raise ValueError("stretch factor must be positive")
    if n_out is None:
        n_out = int(round(len(x) * factor))
    win = np.hanning(frame + 1)[:-1]
    pad = tolerance + frame
    src = np.concatenate([np.zeros(pad), x, np.zeros(pad + frame + int(n_out / factor) + hop)])
    # one extra leading frame so every kept output sample sees two overlapping windows
    n_frames = n_out // hop + 3
    out = np.zeros(n_frames * hop + frame)
    norm = np.zeros_like(out)
    prev = None
    for m in range(n_frames):
        nominal = pad + int(round((m - 1) * hop / factor))
        if prev is None:
            pos = nominal
        else:
            target = src[prev + hop:prev + hop + frame]
            region = src[nominal - tolerance:nominal + tolerance + frame]
            score = signal.correlate(region, target, mode="valid")
            pos = nominal - tolerance + int(np.argmax(score))
        out[m * hop:m * hop + frame] += src[pos:pos + frame] * win
        norm[m * hop:m * hop + frame] += win
        prev = pos
    return (out / np.maximum(norm, 1e-3))[hop:hop + n_out]


def pitch_shift(x: np.ndarray, semitones: float) -> np.ndarray:
    """Resample by 2^(-s/12) then stretch back to the original length."""
    ratio = Fraction(2.0 ** (-semitones / 12.0)).limit_denominator(100)
    if ratio == 1:
        return x.copy()
    y = resample_ratio(x, ratio.numerator, ratio.denominator)
    return time_stretch(y, len(x) / len(y), n_out=len(x))


def band_filter(x: np.ndarray, sr: int, kind: str, cutoff: float, order: int = 4) -> np.ndarray:
    """4th-order Butterworth, run forward and backward (zero phase)."""
    sos = signal.butter(order, cutoff, btype=kind, fs=sr, output="sos")
    return signal.sosfiltfilt(sos, x)


def _choose(rng, probs, force_one):
    chosen = [rng.random() < p for p in probs]
    if force_one and not any(chosen):
        chosen[int(rng.integers(0, len(chosen)))] = True
    return chosen


def apply_weak(clip: AudioClip, rng, probs=WEAK_P, force_one=False):
    if len(clip) == 0:
        raise ValueError("empty clip")
    x = clip.samples.copy()
    tags = []
    noise, comp, verb = _choose(rng, probs, force_one)
    if noise:
        x = add_noise(x, rng.uniform(*SNR_RANGE), rng)
        tags.append("noise")
    if comp:
        x = mu_law_roundtrip(x / max(1.0, np.max(np.abs(x))))
        tags.append("mulaw")
    if verb:
        x = reverb(x, clip.sample_rate, rng.uniform(*RT60_RANGE), rng)
        tags.append("reverb")
    return AudioClip(_renorm(x), clip.sample_rate), tuple(tags)


def apply_strong(clip: AudioClip, rng, probs=STRONG_P, force_one=False):
    if len(clip) == 0:
        raise ValueError("empty clip")
    x = clip.samples.copy()
    tags = []
    pitch, stretch, filt = _choose(rng, probs, force_one)
    if pitch:
        x = pitch_shift(x, rng.uniform(*SEMITONE_RANGE))
        tags.append("pitch")
    if stretch:
        x = time_stretch(x, rng.uniform(*STRETCH_RANGE))
        tags.append("stretch")
    if filt:
        if rng.random() < 0.5:
            x = band_filter(x, clip.sample_rate, "lowpass", rng.uniform(*LOWPASS_RANGE))
            tags.append("lowpass")
        else:
            x = band_filter(x, clip.sample_rate, "highpass", rng.uniform(*HIGHPASS_RANGE))
            tags.append("highpass")
    return AudioClip(_renorm(x), clip.sample_rate), tuple(tags)


def perturb_weak(clip: AudioClip, rng: np.random.Generator, probs=WEAK_P) -> AudioClip:
    """Noise / mu-law companding / reverberation, each with its own probability."""
    return apply_weak(clip, rng, probs)[0]


def perturb_strong(clip: AudioClip, rng: np.random.Generator, probs=STRONG_P) -> AudioClip:
    """Pitch shift / time stretch / band filtering, each with its own probability."""
    return apply_strong(clip, rng, probs)[0]


# ---------------------------------------------------------------------------
# corpus

@dataclass
class Corpus:
    train: Dataset
    eval1: Dataset
    eval2: Dataset
    train_unknown: tuple[int, ...] = TRAIN_UNKNOWN
    eval_unknown: tuple[int, ...] = EVAL_UNKNOWN
    meta: dict = field(default_factory=dict)

    def all(self) -> Dataset:
        return self.train + self.eval1 + self.eval2


def _source(cls: int) -> str:
    return UNKNOWN_SOURCE if cls == UNKNOWN else KNOWN_SOURCES[cls]


def _families(cls: int, unknown) -> list[int]:
    return list(unknown) if cls == UNKNOWN else [cls]


def build_corpus(n_per_class: int = 100, seed: int = 0, n_eval_per_class: int = 30,
                 duration_s: float = 1.0, train_unknown=TRAIN_UNKNOWN,
                 eval_unknown=EVAL_UNKNOWN) -> Corpus:
    """Train split (classes 0-4 + unknown families A) and two evaluation splits.

    eval1 holds clean (part "clean") and weakly perturbed (part "weak")
    clips; eval2 holds strongly perturbed clips. Both use the held-out
    unknown families B for class 5.
    """
    if n_per_class < 10:
        raise ValueError(f"n_per_class must be >= 10, got {n_per_class}")
    if n_eval_per_class < 2:
        raise ValueError(f"n_eval_per_class must be >= 2, got {n_eval_per_class}")
    if set(train_unknown) & set(eval_unknown):
        raise ValueError("train and eval unknown families overlap")
    if min(list(train_unknown) + list(eval_unknown)) < 5:
        raise ValueError("unknown family ids must be >= 5")

    def make(split, cls, i, families):
        fam = families[i % len(families)]
        rng = np.random.default_rng([seed, {"train": 0, "eval1": 1, "eval2": 2}[split], cls, i])
        clip = gen_sample(family_spec(fam), duration_s, rng)
        return rng, fam, clip

    train, eval1, eval2 = [], [], []
    for cls in range(6):
        fams = _families(cls, train_unknown)
        for i in range(n_per_class):
            _, fam, clip = make("train", cls, i, fams)
            train.append(Example(f"train_c{cls}_{i:04d}", one_hot(cls), _source(cls), clip=clip,
                                 family=fam, split="train", part="clean"))
        fams = _families(cls, eval_unknown)
        for i in range(n_eval_per_class):
            rng, fam, clip = make("eval1", cls, i, fams)
            part, tags = "clean", ()
            if i % 2 == 1:
                clip, tags = apply_weak(clip, rng, force_one=True)
                part = "weak"
            eval1.append(Example(f"eval1_c{cls}_{i:04d}", one_hot(cls), _source(cls), clip=clip,
                                 family=fam, split="eval1", part=part, tags=tags))
        for i in range(n_eval_per_class):
            rng, fam, clip = make("eval2", cls, i, fams)
            clip, tags = apply_strong(clip, rng, force_one=True)
            eval2.append(Example(f"eval2_c{cls}_{i:04d}", one_hot(cls), _source(cls), clip=clip,
                                 family=fam, split="eval2", part="strong", tags=tags))
    meta = dict(n_per_class=n_per_class, seed=seed, n_eval_per_class=n_eval_per_class, duration_s=duration_s)
    return Corpus(Dataset(train), Dataset(eval1), Dataset(eval2), tuple(train_unknown), tuple(eval_unknown), meta)


def build_external_unknown(n_per_source: int = 100, seed: int = 0, duration_s: float = 1.0,
                           sources=EXTERNAL_UNKNOWN) -> list[Dataset]:
    """One class-5 Dataset per external source, cycling through that source's families."""
    if n_per_source < 0:
        raise ValueError(f"n_per_source must be >= 0, got {n_per_source}")
    out = []
    for s_idx, fams in enumerate(sources):
        if not fams or min(fams) < 5:
            raise ValueError("external sources need unknown family ids >= 5")
        exs = []
        for i in range(n_per_source):
            fam = fams[i % len(fams)]
            rng = np.random.default_rng([seed, 3, s_idx, i])
            exs.append(Example(f"ext{s_idx}_{i:04d}", one_hot(UNKNOWN), UNKNOWN_SOURCE,
                               clip=gen_sample(family_spec(fam), duration_s, rng),
                               family=fam, split="external", part="clean"))
        out.append(Dataset(exs))
    return out


MANIFEST_FIELDS = ["filename", "class_id", "family_id", "split", "part", "perturbations"]


def write_corpus(corpus: Corpus, out_dir, manifest: str = "manifest.csv") -> str:
    """Write every clip as 16-bit WAV under out_dir/<split>/ plus a manifest CSV; returns the manifest path."""
    rows = []
    for ex in corpus.all():
        sub = os.path.join(out_dir, ex.split)
        os.makedirs(sub, exist_ok=True)
        fname = f"{ex.id}.wav"
        write_wav(os.path.join(sub, fname), ex.clip)
        rows.append([f"{ex.split}/{fname}", ex.target, ex.family, ex.split, ex.part, "+".join(ex.tags)])
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, manifest)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)
    return path


def read_manifest(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["class_id"] = int(r["class_id"])
        r["family_id"] = int(r["family_id"])
    return rows
