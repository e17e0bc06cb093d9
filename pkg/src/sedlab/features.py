"""Log-mel features, per-band normalization and teacher-input noise."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal

from .data import SAMPLE_RATE

LOG_FLOOR = 1e-10
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = SAMPLE_RATE
    n_fft: int = 2048
    hop: int = 255
    n_mels: int = 128
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = LOG_FLOOR

    def __post_init__(self):
        if not self.n_fft > self.hop > 0:
            raise ValueError("need window > hop > 0")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")

    @property
    def frame_hop_s(self) -> float:
        return self.hop / self.sample_rate

    def n_frames(self, n_samples: int) -> int:
        return n_samples // self.hop + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    """Triangular HTK-spaced filters, shape ``(n_mels, n_fft // 2 + 1)``, peak 1."""
    fft_freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs - lower) / (center - lower)
    falling = (upper - fft_freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def stft_magnitude(wave: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Centered (reflect-padded) STFT magnitude, shape ``(T, n_fft // 2 + 1)``."""
    wave = np.asarray(wave, dtype=np.float64)
    if wave.size == 0:
        raise ValueError("empty wave")
    pad = cfg.n_fft // 2
    x = np.pad(wave, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[:: cfg.hop]
    window = signal.get_window("hann", cfg.n_fft)
    return np.abs(np.fft.rfft(frames * window, axis=-1))


def compute_mel(wave: np.ndarray, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Magnitude mel spectrogram before the log, shape ``(T, n_mels)``."""
    fb = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.f_min, cfg.f_max)
    return stft_magnitude(wave, cfg) @ fb.T


def compute_log_mel(wave: np.ndarray, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    return np.log(compute_mel(wave, cfg) + cfg.log_floor)


@dataclass(frozen=True, eq=False)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_features(cls, features) -> "FeatureStats":
        """Per-band statistics pooled over every frame of every matrix."""
        stacked = np.concatenate([np.asarray(f, dtype=np.float64) for f in features], axis=0)
        return cls(stacked.mean(axis=0), stacked.std(axis=0))

    @classmethod
    def identity(cls, n_bands: int) -> "FeatureStats":
        return cls(np.zeros(n_bands), np.ones(n_bands))


def normalize(features: np.ndarray, stats: FeatureStats) -> np.ndarray:
    features = np.asarray(features)
    if features.shape[-1] != len(stats.mean) or len(stats.mean) != len(stats.std):
        raise ValueError(f"band count mismatch: features have {features.shape[-1]}, stats {len(stats.mean)}")
    return (features - stats.mean) / np.maximum(stats.std, STD_FLOOR)


def add_noise_at_snr(features: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Additive white Gaussian noise at ``snr_db`` relative to the matrix mean square.

    ``snr_db = inf`` returns the input unchanged.
    """
    features = np.asarray(features)
    if np.isinf(snr_db) and snr_db > 0:
        return features
    power = float(np.mean(np.square(features, dtype=np.float64)))
    noise_std = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    noise = rng.standard_normal(features.shape) * noise_std
    return (features + noise).astype(features.dtype, copy=False)


def add_wave_noise_at_snr(wave: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Waveform-domain variant of :func:`add_noise_at_snr`."""
    return add_noise_at_snr(np.asarray(wave, dtype=np.float64), snr_db, rng)


# -- on-disk cache: little-endian header (T, F, hop) then float32 row-major ---

_CACHE_MAGIC = b"SEDF"
_CACHE_HEADER = struct.Struct("<4sIII")


def write_feature_cache(path: str | Path, features: np.ndarray, hop: int) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    t, f = features.shape
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(_CACHE_MAGIC, t, f, hop))
        fh.write(features.tobytes(order="C"))


def read_feature_cache(path: str | Path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    magic, t, f, hop = _CACHE_HEADER.unpack_from(raw)
    if magic != _CACHE_MAGIC:
        raise ValueError(f"{path}: not a feature cache file")
    body = np.frombuffer(raw, dtype="<f4", offset=_CACHE_HEADER.size)
    if body.size != t * f:
        raise ValueError(f"{path}: truncated feature cache ({body.size} != {t}x{f})")
    return body.reshape(t, f).astype(np.float32), hop
