"""Waveform -> linear Mel magnitudes -> normalised, stacked ASR features."""

from __future__ import annotations

import csv
import wave
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

LOG_FLOOR = 1e-8
STD_FLOOR = 1e-4


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    window: float = 0.032
    hop: float = 0.010
    n_mels: int = 32
    fmin: float = 20.0
    fmax: float = 8000.0
    stack: int = 4
    subsample: int = 3
    per_utterance_norm: bool = False

    def __post_init__(self):
        if self.hop > self.window:
            raise ConfigError("hop must not exceed window")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError("need 0 <= fmin < fmax <= sample_rate/2")
        if self.stack < 1 or self.subsample < 1:
            raise ConfigError("stack and subsample must be >= 1")
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")

    @property
    def win_samples(self) -> int:
        return int(round(self.window * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop * self.sample_rate))

    @property
    def n_fft(self) -> int:
        return 1 << (self.win_samples - 1).bit_length()

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def feature_dim(self) -> int:
        return self.n_mels * self.stack

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NormStats:
    """Per-band mean and std of log-Mel values."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError("mean and std shapes differ")
        if np.any(self.std <= 0):
            raise ValueError("normalisation std must be > 0")

    def tiled(self, stack: int) -> "NormStats":
        """Stats laid out for stacked frames (oldest frame first)."""
        return NormStats(np.tile(self.mean, stack), np.tile(self.std, stack))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mean"]), np.array(d["std"]))


# ---------------------------------------------------------------- spectra


def magnitude_spectrogram(waveform: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Hann-windowed magnitude STFT, frames x (n_fft/2 + 1)."""
    x = np.asarray(waveform, dtype=np.float64)
    win = cfg.win_samples
    if x.ndim != 1 or x.size < win:
        raise ValueError(f"waveform needs at least {win} samples, got {x.size}")
    hop = cfg.hop_samples
    n_frames = 1 + (x.size - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * hann_window(win)
    return np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=-1))


def hann_window(n: int) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    lin = f / f_sp
    with np.errstate(divide="ignore"):
        logv = min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep
    return np.where(f >= min_log_hz, logv, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_center_frequencies(cfg: FeatureConfig) -> np.ndarray:
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return pts[1:-1]


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Peak-1 triangular filters, (n_fft/2 + 1) x n_mels."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down)).T
    empty = np.flatnonzero(fb.sum(axis=0) == 0)
    if empty.size:
        raise ConfigError(
            f"n_mels={cfg.n_mels} too large for n_fft={cfg.n_fft}: filters {empty.tolist()} are empty"
        )
    return fb


def mel_spectrogram(waveform: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Linear-magnitude Mel spectrogram, frames x n_mels, all values >= 0."""
    return magnitude_spectrogram(waveform, cfg) @ mel_filterbank(cfg)


# ---------------------------------------------------------------- ASR features


def stack_frames(x: np.ndarray, stack: int, subsample: int) -> np.ndarray:
    """Concatenate ``stack`` frames ending at t (oldest first), keep every ``subsample``-th.

    The start is left-padded by repeating the first frame so no frame looks
    ahead. Works on the last two axes (frames, dims).
    """
    x = np.asarray(x)
    n = x.shape[-2]
    parts = []
    for lag in range(stack - 1, -1, -1):
        src = np.clip(np.arange(n) - lag, 0, None)
        parts.append(np.take(x, src, axis=-2))
    stacked = np.concatenate(parts, axis=-1)
    return stacked[..., ::subsample, :]


def log_compress(x: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(x, LOG_FLOOR))


def normalization_stats(corpus: Sequence[np.ndarray]) -> NormStats:
    """Population mean/std of log values per band over a corpus of Mel spectrograms."""
    if len(corpus) == 0:
        raise ValueError("normalization_stats needs a non-empty corpus")
    logs = np.concatenate([log_compress(np.asarray(m)) for m in corpus], axis=0)
    if logs.shape[0] < 2:
        raise ValueError("normalization_stats needs at least 2 frames")
    mean = logs.mean(axis=0)
    std = np.maximum(logs.std(axis=0), STD_FLOOR)
    return NormStats(mean, std)


def utterance_stats(linear_mel: np.ndarray) -> NormStats:
    logs = log_compress(linear_mel)
    return NormStats(logs.mean(axis=0), np.maximum(logs.std(axis=0), STD_FLOOR))


def asr_feature_pipeline(linear_mel: np.ndarray, stats: NormStats, cfg: FeatureConfig) -> np.ndarray:
    """log -> per-band mean/variance normalisation -> stack -> subsample."""
    if np.any(stats.std <= 0):
        raise ValueError("normalisation std must be > 0")
    normed = (log_compress(linear_mel) - stats.mean) / stats.std
    return stack_frames(normed, cfg.stack, cfg.subsample)


def n_output_frames(n_frames: int, subsample: int) -> int:
    return -(-n_frames // subsample)


# ---------------------------------------------------------------- I/O


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read 16-bit PCM; returns (samples x channels squeezed to 1-D if mono, rate)."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        n_ch = w.getnchannels()
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    data = data.reshape(-1, n_ch)
    return (data[:, 0] if n_ch == 1 else data), rate


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(x.shape[1])
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def write_matrix_csv(path: str | Path, matrix: np.ndarray, prefix: str = "d") -> None:
    """Frame-major CSV, one row per frame, ``repr`` floats so values round-trip."""
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"{prefix}{i}" for i in range(m.shape[1])])
        for row in m:
            writer.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
