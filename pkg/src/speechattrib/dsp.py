"""Log-mel front end: waveform -> (n_mels x n_frames) log-power grid."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from functools import lru_cache

import numpy as np

from .audio_io import AudioClip


@dataclass(frozen=True)
class SpecConfig:
    sample_rate: int = 16000
    n_fft: int = 2048
    win_length: int = 2048
    hop_length: int = 250
    n_mels: int = 128
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-6

    def __post_init__(self):
        if not (1 <= self.win_length <= self.n_fft):
            raise ValueError("need 1 <= win_length <= n_fft")
        if self.hop_length < 1:
            raise ValueError("hop_length must be >= 1")
        if not (0 <= self.f_min < self.f_max <= self.sample_rate / 2):
            raise ValueError("need 0 <= f_min < f_max <= sample_rate/2")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def n_frames(self, n_samples: int) -> int:
        return -(-n_samples // self.hop_length)

    def to_dict(self) -> dict:
        return asdict(self)


# 6 s segments -> 128 x 384
PART1 = SpecConfig(n_mels=128)
# 8 s segments -> 256 x 512
PART2 = SpecConfig(n_mels=256)
# desk-scale preset for the procedural corpus: 1 s -> 32 x 32
TOY = SpecConfig(n_fft=512, win_length=512, hop_length=500, n_mels=32)

PRESETS = {"part1": PART1, "part2": PART2, "toy": TOY}
PRESET_DURATIONS = {"part1": 6.0, "part2": 8.0, "toy": 1.0}


@dataclass(frozen=True, eq=False)
class MelSpec:
    values: np.ndarray
    config: SpecConfig

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def _window(n_fft: int, win_length: int) -> np.ndarray:
    # periodic Hann, centered inside the FFT frame
    w = np.zeros(n_fft)
    off = (n_fft - win_length) // 2
    w[off:off + win_length] = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win_length) / win_length)
    w.setflags(write=False)
    return w


def frames(x: np.ndarray, cfg: SpecConfig) -> np.ndarray:
    """Windowed frames, shape (n_frames, n_fft); frame t centered on sample t*hop."""
    n = len(x)
    n_frames = cfg.n_frames(n)
    half = cfg.n_fft // 2
    padded = np.zeros((n_frames - 1) * cfg.hop_length + cfg.n_fft)
    stop = min(n, len(padded) - half)
    padded[half:half + stop] = x[:stop]
    view = np.lib.stride_tricks.sliding_window_view(padded, cfg.n_fft)[::cfg.hop_length]
    return view[:n_frames] * _window(cfg.n_fft, cfg.win_length)


def stft_power(clip: AudioClip, cfg: SpecConfig) -> np.ndarray:
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(f"clip rate {clip.sample_rate} != config rate {cfg.sample_rate}")
    if len(clip) == 0:
        raise ValueError("empty clip")
    spec = np.fft.rfft(frames(clip.samples, cfg), axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


@lru_cache(maxsize=16)
def mel_filterbank(cfg: SpecConfig) -> np.ndarray:
    """Triangular HTK filters with unit peaks, shape (n_mels, n_fft//2 + 1)."""
    n_bins = cfg.n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    edges = mel_to_hz(np.linspace(mel(cfg.f_min), mel(cfg.f_max), cfg.n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - lo) / (mid - lo)
    falling = (hi - bin_hz) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    # filters narrower than one FFT bin fall back to their nearest bin
    for m in np.flatnonzero(fb.max(axis=1) <= 0):
        fb[m, int(np.argmin(np.abs(bin_hz - mid[m, 0])))] = 1.0
    fb.setflags(write=False)
    return fb


def log_mel(power: np.ndarray, fb: np.ndarray, cfg: SpecConfig) -> MelSpec:
    if power.ndim != 2 or fb.shape[1] != power.shape[0]:
        raise ValueError(f"filterbank {fb.shape} incompatible with power grid {power.shape}")
    return MelSpec(np.log(fb @ power + cfg.log_floor), cfg)


def transform(clip: AudioClip, cfg: SpecConfig) -> MelSpec:
    return log_mel(stft_power(clip, cfg), mel_filterbank(cfg), cfg)


def spec_to_csv(spec: MelSpec, path) -> None:
    np.savetxt(path, spec.values, delimiter=",", fmt="%.6f")


def expected_shape(cfg: SpecConfig, duration_s: float) -> tuple[int, int]:
    return cfg.n_mels, cfg.n_frames(int(round(duration_s * cfg.sample_rate)))

