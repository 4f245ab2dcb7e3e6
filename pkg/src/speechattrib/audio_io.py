"""Waveform loading, resampling, normalization and fixed-length segmenting."""
from __future__ import annotations

import os
import struct
import wave
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import signal

EPS_STD = 1e-8
KAISER_BETA = 8.0
ZERO_CROSSINGS = 32

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    """Base class for WAV decoding failures."""


class MalformedWavError(WavError):
    """The RIFF/WAVE container or its chunks are broken."""


class UnsupportedWavEncoding(WavError):
    """A well-formed WAV whose sample encoding is not handled here."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("clip contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _decode_pcm(raw: bytes, bits: int, fmt: int, n_channels: int) -> np.ndarray:
    if fmt == _PCM:
        if bits == 8:
            x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
        elif bits == 16:
            x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
        elif bits == 24:
            b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
            v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
            v = np.where(v >= 1 << 23, v - (1 << 24), v)
            x = v.astype(np.float64) / float(1 << 23)
        else:
            raise UnsupportedWavEncoding(f"unsupported integer bit depth: {bits}")
    elif fmt == _IEEE_FLOAT:
        if bits != 32:
            raise UnsupportedWavEncoding(f"unsupported float bit depth: {bits}")
        x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedWavEncoding(f"unsupported WAV format tag: {fmt:#x}")
    return x.reshape(-1, n_channels)


def load_wav(path) -> AudioClip:
    """Read a PCM WAV file into a mono clip.

    Integer encodings are scaled to [-1, 1]; stereo and wider files are
    downmixed by averaging channels.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such WAV file: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: not a RIFF/WAVE file")

    fmt_chunk = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            fmt_chunk = body
        elif cid == b"data":
            if len(body) < size:
                raise MalformedWavError(f"{path}: truncated data chunk")
            payload = body
        pos += 8 + size + (size & 1)
    if fmt_chunk is None or len(fmt_chunk) < 16:
        raise MalformedWavError(f"{path}: missing or short fmt chunk")
    if payload is None:
        raise MalformedWavError(f"{path}: missing data chunk")

    fmt, n_channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt_chunk[:16])
    if fmt == _EXTENSIBLE:
        if len(fmt_chunk) < 40:
            raise MalformedWavError(f"{path}: short WAVE_FORMAT_EXTENSIBLE header")
        (fmt,) = struct.unpack("<H", fmt_chunk[24:26])
    if n_channels < 1 or rate < 1 or bits == 0:
        raise MalformedWavError(f"{path}: invalid fmt fields")
    if block_align != n_channels * ((bits + 7) // 8):
        raise MalformedWavError(f"{path}: block_align {block_align} inconsistent with format")
    usable = len(payload) - len(payload) % block_align
    frames = _decode_pcm(payload[:usable], bits, fmt, n_channels)
    return AudioClip(frames.mean(axis=1), rate)


def write_wav(path, clip: AudioClip) -> None:
    """Write a clip as 16-bit PCM mono, clipping to [-1, 1)."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())


@lru_cache(maxsize=32)
def _sinc_filter(up: int, down: int) -> np.ndarray:
    # Cutoff at the lower of the two Nyquist rates, expressed in the upsampled domain.
    m = max(up, down)
    taps = signal.firwin(2 * ZERO_CROSSINGS * m + 1, 1.0 / m, window=("kaiser", KAISER_BETA))
    taps = taps * up
    taps.setflags(write=False)
    return taps


def resample_ratio(x: np.ndarray, up: int, down: int) -> np.ndarray:
    """Windowed-sinc rational resampling of a raw array by up/down."""
    if up == down:
        return np.array(x, dtype=np.float64, copy=True)
    y = signal.resample_poly(x, up, down, window=_sinc_filter(up, down))
    n_out = int(round(len(x) * up / down))
    return y[:n_out]


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return clip
    ratio = Fraction(int(target_rate), clip.sample_rate)
    y = resample_ratio(clip.samples, ratio.numerator, ratio.denominator)
    return AudioClip(y, target_rate)


def z_normalize(clip: AudioClip) -> AudioClip:
    if len(clip) == 0:
        raise ValueError("cannot normalize an empty clip")
    x = clip.samples
    std = x.std()
    if std < EPS_STD:
        return AudioClip(np.zeros_like(x), clip.sample_rate)
    return AudioClip((x - x.mean()) / std, clip.sample_rate)


def random_segment(clip: AudioClip, duration_s: float, rng: np.random.Generator) -> AudioClip:
    """Crop (or zero-pad) a clip to exactly ``duration_s`` seconds at a random offset."""
    if len(clip) == 0:
        raise ValueError("cannot segment an empty clip")
    if duration_s <= 0:
        raise ValueError(f"duration_s must be positive, got {duration_s}")
    target = int(round(duration_s * clip.sample_rate))
    n = len(clip)
    if n == target:
        return clip
    if n > target:
        start = int(rng.integers(0, n - target + 1))
        return AudioClip(clip.samples[start:start + target], clip.sample_rate)
    out = np.zeros(target)
    start = int(rng.integers(0, target - n + 1))
    out[start:start + n] = clip.samples
    return AudioClip(out, clip.sample_rate)
