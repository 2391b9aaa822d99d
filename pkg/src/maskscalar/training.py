"""Losses, lambda / alpha schedules, Adam, and the deterministic training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig, TrainSchedule
from .features import ConfigError
from .model import (
    PREDICTED,
    AlphaMode,
    FrontendParams,
    ModelConfig,
    check_mode,
    frontend_forward,
    frozen_asr_encoder,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .scenes import FeatureStats, TrainingExample, corpus_stats, scene_pool, scene_to_example

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "l_irm", "l_asr", "lambda", "total", "mean_alpha"]


class TrainingError(RuntimeError):
    """Training cannot continue (non-finite loss, bad resume state)."""


# ---------------------------------------------------------------- losses


def mask_loss(target, m_hat, axis=None) -> ad.Tensor:
    """||M - M_hat||_1 + ||M - M_hat||_2^2 with entry-wise norms."""
    target, m_hat = ad.as_tensor(target), ad.as_tensor(m_hat)
    if target.shape != m_hat.shape:
        raise ValueError(f"shape mismatch: {target.shape} vs {m_hat.shape}")
    diff = ad.sub(target, m_hat)
    return ad.l1_norm(diff, axis=axis) + ad.squared_l2(diff, axis=axis)


def asr_loss(clean_features, enhanced_features, frozen: dict[str, ad.Tensor], axis=None) -> ad.Tensor:
    """Squared distance between frozen-encoder embeddings of clean and enhanced features.

    The clean branch is data: it is embedded without a graph.
    """
    enhanced_features = ad.as_tensor(enhanced_features)
    clean = np.asarray(getattr(clean_features, "data", clean_features))
    if clean.shape != enhanced_features.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {enhanced_features.shape}")
    with ad.no_grad():
        ref = frozen_asr_encoder(clean, frozen).data
    return ad.squared_l2(frozen_asr_encoder(enhanced_features, frozen) - ref, axis=axis)


@dataclass
class LossBreakdown:
    l_irm: float
    l_asr: float
    lambda_asr: float
    total: float
    mean_alpha: float = float("nan")


# ---------------------------------------------------------------- schedules


def lambda_schedule(step: int, sched: TrainSchedule) -> float:
    """0 until the ramp starts, linear up to ``lambda_max``, then constant."""
    if step <= sched.lambda_start_step:
        return 0.0
    if step >= sched.lambda_end_step:
        return float(sched.lambda_max)
    frac = (step - sched.lambda_start_step) / (sched.lambda_end_step - sched.lambda_start_step)
    return float(sched.lambda_max) * frac


def alpha_mode(step: int, sched: TrainSchedule, predict_alpha: bool = True) -> AlphaMode:
    """Fixed alpha before the unfreeze step, predicted from it on."""
    if predict_alpha and step >= sched.alpha_unfreeze_step:
        return PREDICTED
    return float(sched.alpha_fixed_value)


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    inputs: np.ndarray
    noisy: np.ndarray
    target: np.ndarray
    clean_features: np.ndarray
    asr_mean: np.ndarray
    asr_std: np.ndarray
    modes: list[str]
    indices: list[int]

    @classmethod
    def from_examples(cls, examples: Sequence[TrainingExample], indices: Sequence[int] | None = None) -> "Batch":
        if not examples:
            raise ValueError("empty batch")
        frames = {ex.frames for ex in examples}
        if len(frames) != 1:
            raise ValueError(f"examples in a batch must share the frame count, got {sorted(frames)}")
        return cls(
            inputs=np.stack([ex.inputs for ex in examples]),
            noisy=np.stack([ex.noisy_stacked for ex in examples]),
            target=np.stack([ex.target_mask for ex in examples]),
            clean_features=np.stack([ex.clean_asr_features for ex in examples]),
            asr_mean=np.stack([ex.asr_mean for ex in examples])[:, None, :],
            asr_std=np.stack([ex.asr_std for ex in examples])[:, None, :],
            modes=[ex.meta["mode"] for ex in examples],
            indices=list(indices) if indices is not None else list(range(len(examples))),
        )

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class StepGraph:
    total: ad.Tensor
    l_irm: ad.Tensor  # per example
    l_asr: ad.Tensor  # per example
    output: object


def batch_losses(
    batch: Batch,
    params: FrontendParams,
    cfg: ModelConfig,
    mode: AlphaMode,
    lambda_asr: float,
    beta: float | None = None,
) -> StepGraph:
    for m in batch.modes:
        check_mode(cfg, m)
    out = frontend_forward(batch.inputs, batch.noisy, batch.asr_mean, batch.asr_std, params, cfg, mode, beta)
    l_irm = mask_loss(batch.target, out.m_hat, axis=(-2, -1))
    if lambda_asr == 0.0:
        # zero weight: keep the value for logging but leave it out of the graph
        with ad.no_grad():
            l_asr = asr_loss(batch.clean_features, ad.Tensor(out.asr_features.data), params.frozen_asr, axis=(-2, -1))
    else:
        l_asr = asr_loss(batch.clean_features, out.asr_features, params.frozen_asr, axis=(-2, -1))
    # mean over the example axis; leading axes (if any) are kept
    total = ad.mean(l_irm, axis=-1) + ad.mean(l_asr, axis=-1) * lambda_asr
    return StepGraph(total, l_irm, l_asr, out)


def loss_terms(
    batch: Batch,
    params: FrontendParams,
    cfg: ModelConfig,
    mode: AlphaMode,
    lambda_asr: float,
    beta: float | None = None,
) -> ad.Tensor:
    """Per-entry terms of the batch loss along the last axis; their sum is ``batch_losses().total``."""
    out = frontend_forward(batch.inputs, batch.noisy, batch.asr_mean, batch.asr_std, params, cfg, mode, beta)
    n = batch.target.shape[-3]  # examples; leading axes are probe copies
    irm = mask_loss(batch.target, out.m_hat, axis=())
    asr = asr_loss(batch.clean_features, out.asr_features, params.frozen_asr, axis=())
    lead = irm.shape[:-3]
    parts = [ad.reshape(irm, lead + (-1,)) * (1.0 / n), ad.reshape(asr, lead + (-1,)) * (lambda_asr / n)]
    return ad.concat(parts, axis=-1)


# ---------------------------------------------------------------- optimiser


class Adam:
    """Adam with per-parameter step counts.

    Parameters whose gradient is missing or identically zero are skipped, so
    a branch that never received signal keeps its exact initial values.
    """

    def __init__(self, lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.clip_norm = clip_norm
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, ad.Tensor]) -> None:
        grads = {n: p.grad for n, p in params.items() if p.grad is not None and np.any(p.grad)}
        if self.clip_norm is not None and grads:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip_norm:
                grads = {n: g * (self.clip_norm / norm) for n, g in grads.items()}
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            t = self.t.get(name, 0) + 1
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            m_hat = m / (1 - self.b1**t)
            v_hat = v / (1 - self.b2**t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self.m[name], self.v[name], self.t[name] = m, v, t

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.t:
            out[f"adam_m/{name}"] = self.m[name]
            out[f"adam_v/{name}"] = self.v[name]
            out[f"adam_t/{name}"] = np.array([float(self.t[name])])
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            if kind == "adam_m":
                self.m[name] = arr.copy()
            elif kind == "adam_v":
                self.v[name] = arr.copy()
            elif kind == "adam_t":
                self.t[name] = int(arr[0])


def train_step(
    batch: Batch,
    params: FrontendParams,
    opt: Adam,
    step: int,
    sched: TrainSchedule,
    cfg: ModelConfig,
) -> LossBreakdown:
    """One forward/backward/update; parameters are updated in place."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    lam = lambda_schedule(step, sched)
    mode = alpha_mode(step, sched, cfg.predict_alpha)
    trainable = params.trainable()
    ad.zero_grad(trainable.values())
    graph = batch_losses(batch, params, cfg, mode, lam)
    for term, vec in (("l_irm", graph.l_irm.data), ("l_asr", graph.l_asr.data)):
        bad = np.flatnonzero(~np.isfinite(vec))
        if bad.size:
            raise TrainingError(
                f"non-finite {term} at step {step} for example {batch.indices[int(bad[0])]}"
            )
    ad.backward(graph.total)
    opt.step(trainable)
    alpha = graph.output.alpha_track
    return LossBreakdown(
        l_irm=float(graph.l_irm.data.mean()),
        l_asr=float(graph.l_asr.data.mean()),
        lambda_asr=lam,
        total=float(graph.total.data),
        mean_alpha=float(np.mean(alpha)),
    )


# ---------------------------------------------------------------- data


@dataclass
class TrainingData:
    examples: list[TrainingExample]
    stats: FeatureStats


def prepare_training_data(cfg: ExperimentConfig, stats: FeatureStats | None = None) -> TrainingData:
    scenes = scene_pool(cfg.simulator, cfg.feature)
    if stats is None:
        stats = corpus_stats(scenes)
    return TrainingData([scene_to_example(s, stats, cfg.feature) for s in scenes], stats)


def batch_indices(step: int, sched: TrainSchedule, pool_size: int) -> list[int]:
    """Batch members for ``step``: a pure function of (seed, step)."""
    rng = np.random.default_rng([sched.seed & 0xFFFFFFFF, step])
    size = min(sched.batch_size, pool_size)
    return sorted(int(i) for i in rng.choice(pool_size, size=size, replace=False))


def batch_for_step(data: TrainingData, step: int, sched: TrainSchedule) -> Batch:
    idx = batch_indices(step, sched, len(data.examples))
    return Batch.from_examples([data.examples[i] for i in idx], idx)


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    params: FrontendParams
    optimizer: Adam
    step: int
    stats: FeatureStats
    metrics: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:06d}.ckpt"


def save_training_checkpoint(path: Path, cfg: ExperimentConfig, params: FrontendParams, opt: Adam,
                             step: int, stats: FeatureStats) -> None:
    arrays = {f"param/{k}": v for k, v in params.named_arrays().items()}
    arrays.update(opt.state_arrays())
    meta = {"step": step, "config": cfg.to_dict(), "stats": stats.to_dict()}
    save_checkpoint(path, arrays, meta)


@dataclass
class LoadedCheckpoint:
    params: FrontendParams
    arrays: dict[str, np.ndarray]
    meta: dict

    @property
    def step(self) -> int:
        return int(self.meta["step"])

    @property
    def stats(self) -> FeatureStats:
        return FeatureStats.from_dict(self.meta["stats"])


def read_training_checkpoint(path: str | Path) -> LoadedCheckpoint:
    arrays, meta = load_checkpoint(path)
    params = FrontendParams.from_arrays({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    return LoadedCheckpoint(params, arrays, meta)


# fields allowed to differ when warm-starting from another run's checkpoint
_RESUME_FREE = {("model", "predict_alpha"), ("model", "stop_gradient"),
                ("schedule", "total_steps"), ("schedule", "checkpoint_every"), ("schedule", "log_every"),
                ("eval", "*"), ("gradcheck", "*")}


def check_compatible(saved: dict, cfg: ExperimentConfig) -> None:
    current = cfg.to_dict()
    bad = []
    for section, values in current.items():
        if (section, "*") in _RESUME_FREE:
            continue
        for key, val in values.items():
            if (section, key) in _RESUME_FREE:
                continue
            if saved.get(section, {}).get(key) != val:
                bad.append(f"{section}.{key}")
    if bad:
        raise ConfigError(f"checkpoint incompatible with config; differing fields: {', '.join(bad)}")


def _read_metrics(path: Path, before_step: int) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [r for r in csv.DictReader(fh) if int(r["step"]) < before_step]


def _fmt(v: float) -> str:
    return repr(float(v))


def train(
    cfg: ExperimentConfig,
    out_dir: str | Path,
    resume: str | Path | None = None,
    data: TrainingData | None = None,
) -> TrainResult:
    """Run ``cfg.schedule.total_steps`` steps, writing checkpoints and ``metrics.csv``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    sched = cfg.schedule

    if resume is not None:
        ckpt = read_training_checkpoint(resume)
        check_compatible(ckpt.meta["config"], cfg)
        params, stats, start = ckpt.params, ckpt.stats, ckpt.step
        opt = Adam(sched.learning_rate, clip_norm=sched.clip_norm)
        opt.load_state_arrays({k: v for k, v in ckpt.arrays.items() if k.startswith("adam_")})
    else:
        params = init_params(cfg.model, sched.seed)
        opt = Adam(sched.learning_rate, clip_norm=sched.clip_norm)
        stats, start = None, 0

    if data is None:
        data = prepare_training_data(cfg, stats)
    stats = data.stats

    metrics_path = out / "metrics.csv"
    rows = _read_metrics(metrics_path, start)
    result = TrainResult(params, opt, start, stats, metrics=[])
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for r in rows:
            writer.writerow([r[k] for k in METRICS_HEADER])
        for step in range(start, sched.total_steps):
            batch = batch_for_step(data, step, sched)
            lb = train_step(batch, params, opt, step, sched, cfg.model)
            if step % sched.log_every == 0 or step == sched.total_steps - 1:
                row = [step, _fmt(lb.l_irm), _fmt(lb.l_asr), _fmt(lb.lambda_asr), _fmt(lb.total), _fmt(lb.mean_alpha)]
                writer.writerow(row)
                result.metrics.append(dict(zip(METRICS_HEADER, row)))
                log.debug("step %d total %.4f", step, lb.total)
            done = step + 1
            if done % sched.checkpoint_every == 0 or done == sched.total_steps:
                path = out / checkpoint_name(done)
                save_training_checkpoint(path, cfg, params, opt, done, stats)
                result.checkpoints.append(path)
        result.step = sched.total_steps
    return result
