"""Seeded synthetic scenes: harmonic "speech", noise, simple RIRs, echo paths.

Everything here is a pure function of its config and seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .features import (
    ConfigError,
    FeatureConfig,
    NormStats,
    log_compress,
    mel_spectrogram,
    normalization_stats,
    stack_frames,
    utterance_stats,
)
from .masks import ideal_ratio_mask

log = logging.getLogger(__name__)

ENHANCEMENT = "enhancement"
AEC = "aec"
MODES = (ENHANCEMENT, AEC)
NOISE_KINDS = ("white", "pink", "tonal")
TARGET_RMS = 0.1
CLEANER_FLOOR = 0.05
RIR_TAIL_STD = 0.1
TONAL_CHORD_HZ = (261.63, 329.63, 392.0, 523.25, 659.25)
# (pole, zero) corner frequencies in Hz of the three shelving sections that
# approximate a 1/f power slope
PINK_CORNERS_HZ = ((30.0, 75.0), (190.0, 475.0), (1200.0, 3000.0))


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key]))


def derive_seed(master_seed: int, index: int) -> int:
    """Per-example seed, a hash of (master seed, example index)."""
    return int(np.random.SeedSequence([master_seed & 0xFFFFFFFF, index]).generate_state(1)[0])


@dataclass(frozen=True)
class SceneConfig:
    mode: str = ENHANCEMENT
    snr_db: float = 0.0  # SER in AEC mode; +inf means no interference at all
    noise_kind: str = "white"
    rir_length: int = 2000
    rir_decay: float = 0.9985
    duration: float = 1.0
    noise_context: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.noise_kind not in NOISE_KINDS:
            raise ConfigError(f"unknown noise kind {self.noise_kind!r}")
        if self.duration <= 0:
            raise ConfigError("duration must be > 0")
        if self.rir_length < 1:
            raise ConfigError("rir_length must be >= 1")
        if self.noise_context < 0:
            raise ConfigError("noise_context must be >= 0")
        if not 0 <= self.rir_decay < 1:
            raise ConfigError("rir_decay must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_db"] = float(self.snr_db) if math.isfinite(self.snr_db) else str(self.snr_db)
        return d


@dataclass(frozen=True)
class SimulatorConfig:
    """Ranges the training stream samples scenes from."""

    mode: str = ENHANCEMENT
    duration: float = 1.0
    noise_context: float = 1.0
    snr_range: tuple[float, float] = (-10.0, 30.0)
    ser_range: tuple[float, float] = (-20.0, 5.0)
    noise_kinds: tuple[str, ...] = NOISE_KINDS
    rir_length: int = 2000
    t60_range: tuple[float, float] = (0.0, 0.9)
    pool_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        for k in self.noise_kinds:
            if k not in NOISE_KINDS:
                raise ConfigError(f"unknown noise kind {k!r}")
        if self.pool_size < 1:
            raise ConfigError("pool_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("snr_range", "ser_range", "t60_range", "noise_kinds"):
            d[k] = list(d[k])
        return d


def decay_for_t60(t60: float, sample_rate: int) -> float:
    """Per-sample amplitude decay reaching -60 dB after ``t60`` seconds."""
    if t60 <= 0:
        return 0.0
    return float(10.0 ** (-3.0 / (t60 * sample_rate)))


def sample_scene_config(sim: SimulatorConfig, index: int, sample_rate: int) -> SceneConfig:
    seed = derive_seed(sim.seed, index)
    rng = _rng(seed, 7)
    lo, hi = sim.snr_range if sim.mode == ENHANCEMENT else sim.ser_range
    return SceneConfig(
        mode=sim.mode,
        snr_db=float(rng.uniform(lo, hi)),
        noise_kind=str(sim.noise_kinds[rng.integers(len(sim.noise_kinds))]),
        rir_length=sim.rir_length,
        rir_decay=decay_for_t60(float(rng.uniform(*sim.t60_range)), sample_rate),
        duration=sim.duration,
        noise_context=sim.noise_context,
        seed=seed,
    )


# ---------------------------------------------------------------- sources


@dataclass
class SpeechSource:
    waveform: np.ndarray
    f0: np.ndarray
    envelope: np.ndarray


def speech_source(duration: float, seed: int, sample_rate: int = 16000) -> SpeechSource:
    """Harmonic source with a drifting fundamental under an on/off syllable envelope."""
    rng = _rng(seed, 1)
    n = max(1, int(round(duration * sample_rate)))
    t = np.arange(n) / sample_rate

    f0_base = rng.uniform(110.0, 260.0)
    drift_rate = rng.uniform(0.2, 0.4)
    f0 = f0_base * (1.0 + 0.05 * np.sin(2 * np.pi * drift_rate * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = int(rng.integers(3, 7))
    wave = np.zeros(n)
    for k in range(1, n_harm + 1):
        amp = rng.uniform(0.6, 1.0) / k
        wave += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))

    env = np.zeros(n)
    ramp = int(0.01 * sample_rate)
    pos = 0
    on = bool(rng.integers(2))
    while pos < n:
        seg = int(rng.uniform(0.08, 0.25) * sample_rate) if on else int(rng.uniform(0.03, 0.12) * sample_rate)
        seg = max(seg, 1)
        end = min(n, pos + seg)
        if on:
            m = end - pos
            shape = np.ones(m)
            r = min(ramp, m // 2)
            if r > 0:
                rise = 0.5 - 0.5 * np.cos(np.pi * (np.arange(r) + 0.5) / r)
                shape[:r] = rise
                shape[m - r :] = rise[::-1]
            env[pos:end] = shape
        pos = end
        on = not on
    wave *= env
    rms = np.sqrt(np.mean(wave**2))
    if rms > 0:
        wave *= TARGET_RMS / rms
    return SpeechSource(wave, f0, env)


def synth_speech(duration: float, seed: int, sample_rate: int = 16000) -> np.ndarray:
    if duration <= 0:
        raise ValueError("duration must be > 0")
    return speech_source(duration, seed, sample_rate).waveform


def pink_filter(sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    """Cascade of three one-pole/one-zero shelves, as (b, a) coefficients."""
    b, a = np.array([1.0]), np.array([1.0])
    for fp, fz in PINK_CORNERS_HZ:
        p = math.exp(-2 * math.pi * fp / sample_rate)
        q = math.exp(-2 * math.pi * fz / sample_rate)
        b = np.convolve(b, [1.0, -q])
        a = np.convolve(a, [1.0, -p])
    return b, a


def synth_noise(kind: str, duration: float, seed: int, sample_rate: int = 16000) -> np.ndarray:
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    rng = _rng(seed, 2)
    n = max(1, int(round(duration * sample_rate)))
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        b, a = pink_filter(sample_rate)
        warm = sample_rate  # discard the filter's start-up transient
        x = lfilter(b, a, rng.standard_normal(n + warm))[warm:]
    else:
        t = np.arange(n) / sample_rate
        x = sum(np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) for f in TONAL_CHORD_HZ)
    return x * (TARGET_RMS / np.sqrt(np.mean(x**2)))


def rir_generate(cfg: SceneConfig, seed: int) -> np.ndarray:
    """Direct path plus exponentially decaying noise tail, unit energy."""
    rng = _rng(seed, 3)
    h = np.zeros(cfg.rir_length)
    h[0] = 1.0
    if cfg.rir_length > 1 and cfg.rir_decay > 0:
        n = np.arange(1, cfg.rir_length)
        h[1:] = cfg.rir_decay**n * rng.standard_normal(cfg.rir_length - 1) * RIR_TAIL_STD
    return h / np.sqrt(np.sum(h**2))


def convolve(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    if h.size == 1:
        return x * h[0]
    return fftconvolve(x, h)[: x.size]


def mix_at_snr(target: np.ndarray, noise: np.ndarray, snr_db: float) -> tuple[np.ndarray, np.ndarray]:
    """Scale ``noise`` so that target energy / noise energy equals ``snr_db``.

    An infinite SNR yields an all-zero noise.
    """
    target = np.asarray(target, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if target.shape != noise.shape:
        raise ValueError(f"length mismatch: {target.shape} vs {noise.shape}")
    e_t = float(np.sum(target**2))
    if e_t <= 0:
        raise ValueError("target has zero energy")
    if math.isinf(snr_db) and snr_db > 0:
        scaled = np.zeros_like(noise)
        return target + scaled, scaled
    e_n = float(np.sum(noise**2))
    if e_n <= 0:
        raise ValueError("noise has zero energy")
    gain = math.sqrt(e_t / (e_n * 10.0 ** (snr_db / 10.0)))
    scaled = noise * gain
    return target + scaled, scaled


def measured_snr_db(target: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * math.log10(float(np.sum(target**2)) / float(np.sum(noise**2)))


# ---------------------------------------------------------------- cleaner stand-in


@dataclass
class CleanerOutput:
    mel: np.ndarray
    passthrough: bool = False


def stub_cleaner(mixture_mel: np.ndarray, noise_context_mel: np.ndarray) -> CleanerOutput:
    """Mel-domain spectral subtraction standing in for a multichannel cleaner.

    The noise context's mean magnitude is subtracted per band, floored at 5%
    of the mixture. An empty context passes the mixture through and flags it.
    """
    mixture_mel = np.asarray(mixture_mel, dtype=np.float64)
    ctx = np.asarray(noise_context_mel, dtype=np.float64)
    if ctx.size == 0 or ctx.shape[0] == 0:
        log.warning("stub_cleaner: empty noise context, passing mixture through")
        return CleanerOutput(mixture_mel.copy(), passthrough=True)
    if ctx.shape[-1] != mixture_mel.shape[-1]:
        raise ValueError("band counts differ between mixture and noise context")
    noise_est = ctx.mean(axis=0)
    out = np.maximum(mixture_mel - noise_est, CLEANER_FLOOR * mixture_mel)
    return CleanerOutput(out)


# ---------------------------------------------------------------- scenes


@dataclass
class Scene:
    """Linear-Mel views of one simulated utterance (per-frame geometry)."""

    cfg: SceneConfig
    clean_mel: np.ndarray  # reverberant target, X
    noise_mel: np.ndarray  # interference (noise or echo), N
    mic_mel: np.ndarray  # waveform-domain mixture
    channel_a_mel: np.ndarray  # cleaner output or loopback
    cleaner_passthrough: bool
    waveforms: dict = field(default_factory=dict, repr=False)

    @property
    def noisy_mel(self) -> np.ndarray:
        """Mel-domain additive mixture, Y = X + N exactly."""
        return self.clean_mel + self.noise_mel

    @property
    def leakage(self) -> float:
        """Relative gap between waveform-mixed and Mel-additive mixtures."""
        y = self.noisy_mel
        return float(np.linalg.norm(self.mic_mel - y) / max(np.linalg.norm(y), 1e-30))


def make_scene(cfg: SceneConfig, fcfg: FeatureConfig, keep_waveforms: bool = False) -> Scene:
    sr = fcfg.sample_rate
    n = max(fcfg.win_samples, int(round(cfg.duration * sr)))
    n_ctx = int(round(cfg.noise_context * sr))
    silent = math.isinf(cfg.snr_db) and cfg.snr_db > 0

    speech = synth_speech(n / sr, cfg.seed, sr)
    clean = convolve(speech, rir_generate(cfg, cfg.seed))
    if not np.any(clean):
        raise ConfigError("scene produced a silent target; use a longer duration")
    waves = {"clean": clean}

    if cfg.mode == ENHANCEMENT:
        raw = synth_noise(cfg.noise_kind, (n + n_ctx) / sr, cfg.seed + 101, sr)[: n + n_ctx]
        if silent:
            noise, gain = np.zeros(n), 0.0
        else:
            _, noise = mix_at_snr(clean, raw[n_ctx:], cfg.snr_db)
            gain = float(np.sqrt(np.sum(noise**2) / np.sum(raw[n_ctx:] ** 2)))
        context = raw[:n_ctx] * gain
        mic = clean + noise
        mic_mel = mel_spectrogram(mic, fcfg)
        if n_ctx >= fcfg.win_samples:
            ctx_mel = mel_spectrogram(context, fcfg)
        else:
            ctx_mel = np.zeros((0, fcfg.n_mels))
        cleaned = stub_cleaner(mic_mel, ctx_mel)
        channel_a = cleaned.mel
        passthrough = cleaned.passthrough
        waves.update(noise=noise, mic=mic, context=context)
    else:
        if silent:
            loopback = np.zeros(n)
            echo = np.zeros(n)
        else:
            loopback = synth_noise(cfg.noise_kind, n / sr, cfg.seed + 202, sr)[:n]
            echo_path = rir_generate(cfg, cfg.seed + 303)
            _, echo = mix_at_snr(clean, convolve(loopback, echo_path), cfg.snr_db)
        noise = echo
        mic = clean + echo
        mic_mel = mel_spectrogram(mic, fcfg)
        channel_a = mel_spectrogram(loopback, fcfg)
        passthrough = False
        waves.update(noise=echo, mic=mic, loopback=loopback)

    return Scene(
        cfg=cfg,
        clean_mel=mel_spectrogram(clean, fcfg),
        noise_mel=mel_spectrogram(noise, fcfg),
        mic_mel=mic_mel,
        channel_a_mel=channel_a,
        cleaner_passthrough=passthrough,
        waveforms=waves if keep_waveforms else {},
    )


@dataclass
class FeatureStats:
    """Frozen normalisation stats: one per encoder input channel plus the ASR features."""

    a: NormStats
    b: NormStats
    asr: NormStats

    def to_dict(self) -> dict:
        return {"a": self.a.to_dict(), "b": self.b.to_dict(), "asr": self.asr.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(*(NormStats.from_dict(d[k]) for k in ("a", "b", "asr")))


def corpus_stats(scenes: list[Scene]) -> FeatureStats:
    return FeatureStats(
        a=normalization_stats([s.channel_a_mel for s in scenes]),
        b=normalization_stats([s.mic_mel for s in scenes]),
        asr=normalization_stats([s.noisy_mel for s in scenes]),
    )


@dataclass
class TrainingExample:
    """Stacked/subsampled arrays for one scene; all share the frame count."""

    inputs: np.ndarray  # frames x (2 * feature_dim), [channel A | channel B]
    noisy_stacked: np.ndarray  # frames x feature_dim, linear Y the mask multiplies
    target_mask: np.ndarray  # frames x feature_dim, IRM in [0, 1]
    clean_asr_features: np.ndarray  # f_X
    asr_mean: np.ndarray  # feature_dim, tiled log-mean
    asr_std: np.ndarray
    clean_stacked: np.ndarray
    noise_stacked: np.ndarray
    meta: dict

    @property
    def frames(self) -> int:
        return self.inputs.shape[0]


def _normed(mel: np.ndarray, stats: NormStats) -> np.ndarray:
    return (log_compress(mel) - stats.mean) / stats.std


def scene_to_example(scene: Scene, stats: FeatureStats, fcfg: FeatureConfig) -> TrainingExample:
    if fcfg.per_utterance_norm:
        stats = FeatureStats(
            a=utterance_stats(scene.channel_a_mel),
            b=utterance_stats(scene.mic_mel),
            asr=utterance_stats(scene.noisy_mel),
        )
    st = lambda m: stack_frames(m, fcfg.stack, fcfg.subsample)  # noqa: E731
    chan_a = st(_normed(scene.channel_a_mel, stats.a))
    chan_b = st(_normed(scene.mic_mel, stats.b))
    asr = stats.asr.tiled(fcfg.stack)
    clean_stacked = st(scene.clean_mel)
    noise_stacked = st(scene.noise_mel)
    meta = scene.cfg.to_dict()
    meta.update(leakage=scene.leakage, cleaner_passthrough=scene.cleaner_passthrough)
    return TrainingExample(
        inputs=np.concatenate([chan_a, chan_b], axis=-1),
        noisy_stacked=clean_stacked + noise_stacked,
        target_mask=ideal_ratio_mask(clean_stacked, noise_stacked),
        clean_asr_features=(log_compress(clean_stacked) - asr.mean) / asr.std,
        asr_mean=asr.mean,
        asr_std=asr.std,
        clean_stacked=clean_stacked,
        noise_stacked=noise_stacked,
        meta=meta,
    )


def make_example(cfg: SceneConfig, fcfg: FeatureConfig, stats: FeatureStats) -> TrainingExample:
    return scene_to_example(make_scene(cfg, fcfg), stats, fcfg)


def scene_pool(sim: SimulatorConfig, fcfg: FeatureConfig, start: int = 0, count: int | None = None) -> list[Scene]:
    count = sim.pool_size if count is None else count
    return [make_scene(sample_scene_config(sim, i, fcfg.sample_rate), fcfg) for i in range(start, start + count)]


def bucket_scenes(
    sim: SimulatorConfig, fcfg: FeatureConfig, level_db: float, n: int, seed: int
) -> list[Scene]:
    """Scenes at one fixed SNR/SER, other factors sampled like training."""
    out = []
    for i in range(n):
        base = sample_scene_config(replace(sim, seed=seed), i, fcfg.sample_rate)
        out.append(make_scene(replace(base, snr_db=float(level_db)), fcfg))
    return out
