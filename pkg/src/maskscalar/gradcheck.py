"""Finite-difference check of the full frontend loss."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig
from .model import PREDICTED, init_params
from .scenes import FeatureStats, make_scene, sample_scene_config, scene_to_example, corpus_stats
from .training import Batch, loss_terms


@dataclass
class FrontendGradResult:
    mode: str
    stop_gradient: bool
    report: ad.GradReport
    seconds: float

    def to_dict(self) -> dict:
        return {"mode": self.mode, "stop_gradient": self.stop_gradient,
                "seconds": round(self.seconds, 3), **self.report.to_dict()}


def gradcheck_batch(cfg: ExperimentConfig) -> Batch:
    """A short seeded batch; only the first ``gradcheck.frames`` frames are kept."""
    gc = cfg.gradcheck
    sim = replace(cfg.simulator, seed=gc.seed)
    scenes = [make_scene(sample_scene_config(sim, i, cfg.feature.sample_rate), cfg.feature)
              for i in range(gc.batch)]
    stats: FeatureStats = corpus_stats(scenes)
    examples = [scene_to_example(s, stats, cfg.feature) for s in scenes]
    batch = Batch.from_examples(examples)
    t = slice(0, gc.frames)
    return replace(batch, inputs=batch.inputs[:, t], noisy=batch.noisy[:, t],
                   target=batch.target[:, t], clean_features=batch.clean_features[:, t])


def tile_batch(batch: Batch, copies: int) -> Batch:
    """The same batch repeated along a new leading axis."""
    rep = lambda a: np.broadcast_to(a, (copies,) + a.shape)  # noqa: E731
    return replace(batch, inputs=rep(batch.inputs), noisy=rep(batch.noisy), target=rep(batch.target),
                   clean_features=rep(batch.clean_features), asr_mean=rep(batch.asr_mean),
                   asr_std=rep(batch.asr_std))


def frontend_gradcheck(cfg: ExperimentConfig, record: list | None = None) -> FrontendGradResult:
    """Check d(total loss)/d(every trainable element) with predicted alpha."""
    start = time.perf_counter()
    gc = cfg.gradcheck
    batch = gradcheck_batch(cfg)
    params = init_params(cfg.model, gc.seed)
    trainable = params.trainable()

    def loss(copies: int | None = None):
        b = batch if copies is None else tile_batch(batch, copies)
        return loss_terms(b, params, cfg.model, PREDICTED, gc.lambda_asr)

    report = ad.grad_check(loss, trainable, eps=gc.eps, max_per_param=gc.max_per_param,
                           seed=gc.seed, probes=gc.probes, order=gc.order, record=record)
    return FrontendGradResult(cfg.model.mode, cfg.model.stop_gradient, report, time.perf_counter() - start)


def gradcheck_matrix(cfg: ExperimentConfig, modes=("enhancement", "aec"), stop_grads=(False, True)) -> list[FrontendGradResult]:
    out = []
    for mode in modes:
        for sg in stop_grads:
            c = cfg.with_mode(mode)
            out.append(frontend_gradcheck(replace(c, model=replace(c.model, stop_gradient=sg))))
    return out


def worst(results: list[FrontendGradResult]) -> float:
    return float(np.max([r.report.max_rel_error for r in results]))
