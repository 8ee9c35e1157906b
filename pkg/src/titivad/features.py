"""MFCC front end: framing, mel filterbank, log compression, DCT-II."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .audio_io import AudioClip
from .errors import BadConfig, DegenerateFilter, DimMismatch, Empty, RateMismatch, TooShort

STATS_FLOOR = 1e-6


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MfccConfig:
    sample_rate_hz: int = 16000
    frame_len_sec: float = 0.025
    hop_sec: float = 0.010
    n_fft: int | None = None
    n_mels: int = 64
    n_mfcc: int = 40
    fmin_hz: float = 50.0
    fmax_hz: float | None = None
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_fft is None:
            n = 1
            while n < self.frame_len:
                n *= 2
            object.__setattr__(self, "n_fft", n)
        if self.fmax_hz is None:
            object.__setattr__(self, "fmax_hz", self.sample_rate_hz / 2.0)
        self.validate()

    @property
    def frame_len(self) -> int:
        return int(round(self.frame_len_sec * self.sample_rate_hz))

    @property
    def hop(self) -> int:
        return int(round(self.hop_sec * self.sample_rate_hz))

    def validate(self):
        if self.sample_rate_hz <= 0:
            raise BadConfig("sample_rate_hz must be positive")
        if self.frame_len < 1 or self.hop < 1:
            raise BadConfig("frame and hop lengths must be at least one sample")
        n_fft = self.n_fft
        if n_fft < self.frame_len or n_fft & (n_fft - 1):
            raise BadConfig("n_fft must be a power of two >= frame length in samples")
        if not 0 < self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2:
            raise BadConfig("need 0 < fmin_hz < fmax_hz <= sample_rate_hz/2")
        if not 1 <= self.n_mfcc <= self.n_mels:
            raise BadConfig("need 1 <= n_mfcc <= n_mels")
        if not self.log_floor > 0:
            raise BadConfig("log_floor must be positive")

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.frame_len:
            return 0
        return 1 + (num_samples - self.frame_len) // self.hop

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MfccConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    frames: np.ndarray
    frame_times_sec: np.ndarray

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True, eq=False)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray = field()

    def __post_init__(self):
        if np.shape(self.mean) != np.shape(self.std):
            raise DimMismatch("mean and std must have the same shape")
        if not np.all(np.asarray(self.std) > 0):
            raise ValueError("std entries must be strictly positive")

    @classmethod
    def identity(cls, dim: int) -> "FeatureStats":
        return cls(np.zeros(dim), np.ones(dim))


def mel_filterbank(config: MfccConfig) -> np.ndarray:
    """Triangular mel filters, shape ``(n_mels, n_fft // 2 + 1)``, peak value 1."""
    return _mel_filterbank(config.sample_rate_hz, config.n_fft, config.n_mels,
                           float(config.fmin_hz), float(config.fmax_hz)).copy()


@lru_cache(maxsize=16)
def _mel_filterbank(rate, n_fft, n_mels, fmin, fmax):
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * rate / n_fft
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - left) / (center - left)
    falling = (right - freqs) / (right - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) == 0)
    if len(empty):
        raise DegenerateFilter(
            f"{len(empty)} of {n_mels} mel filters cover no FFT bin "
            f"(n_fft={n_fft}); reduce n_mels or raise n_fft"
        )
    fb.flags.writeable = False
    return fb


@lru_cache(maxsize=16)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; row ``k`` is basis function ``k``."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    m.flags.writeable = False
    return m


def hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    n = 1 + (len(samples) - frame_len) // hop
    return np.lib.stride_tricks.sliding_window_view(samples, frame_len)[::hop][:n]


def power_spectrum(clip: AudioClip, config: MfccConfig) -> np.ndarray:
    """One-sided |DFT|^2 of Hann-windowed frames, shape ``(T, n_fft // 2 + 1)``."""
    if clip.sample_rate_hz != config.sample_rate_hz:
        raise RateMismatch(
            f"clip sample rate {clip.sample_rate_hz} Hz != configured {config.sample_rate_hz} Hz"
        )
    if len(clip.samples) < config.frame_len:
        raise TooShort(
            f"clip has {len(clip.samples)} samples, need at least {config.frame_len}"
        )
    frames = frame_signal(clip.samples, config.frame_len, config.hop) * hann(config.frame_len)
    spec = np.fft.rfft(frames, n=config.n_fft, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def frame_times(num_frames: int, config: MfccConfig) -> np.ndarray:
    return (np.arange(num_frames) * config.hop + config.frame_len / 2.0) / config.sample_rate_hz


def log_mel_energies(clip: AudioClip, config: MfccConfig) -> np.ndarray:
    power = power_spectrum(clip, config)
    energies = power @ mel_filterbank(config).T
    return np.log(np.maximum(energies, config.log_floor))


def compute_mfcc(clip: AudioClip, config: MfccConfig) -> FeatureMatrix:
    log_mel = log_mel_energies(clip, config)
    coeffs = log_mel @ dct_matrix(config.n_mels)[:config.n_mfcc].T
    return FeatureMatrix(coeffs, frame_times(len(coeffs), config))


def fit_stats(features) -> FeatureStats:
    """Per-coefficient mean and population std over every frame of ``features``."""
    mats = [f.frames if isinstance(f, FeatureMatrix) else np.asarray(f) for f in features]
    if not mats or sum(len(m) for m in mats) == 0:
        raise Empty("cannot fit feature stats on an empty collection")
    stacked = np.concatenate(mats, axis=0)
    mean = stacked.mean(axis=0)
    std = np.sqrt(((stacked - mean) ** 2).mean(axis=0))
    return FeatureStats(mean, np.maximum(std, STATS_FLOOR))


def standardize(features: FeatureMatrix, stats: FeatureStats) -> FeatureMatrix:
    if features.frames.shape[1] != len(stats.mean):
        raise DimMismatch(
            f"features have {features.frames.shape[1]} coefficients, stats have {len(stats.mean)}"
        )
    return FeatureMatrix((features.frames - stats.mean) / stats.std, features.frame_times_sec)
