"""Proxy metrics, alpha sweeps and checkpoint evaluation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig, build_config
from .features import ConfigError
from .masks import DEFAULT_BETA, distortion_residual, ideal_ratio_mask, oracle_postprocess
from .model import PREDICTED, FrontendParams, enhanced_features, frontend_forward, init_frozen_asr
from .scenes import ENHANCEMENT, FeatureStats, TrainingExample, bucket_scenes, corpus_stats, scene_pool, scene_to_example
from .training import Batch, asr_loss, mask_loss, read_training_checkpoint

SNR_CAP_DB = 99.0
SWEEP_HEADER = ["alpha", "beta", "distortion", "residual", "l_asr_proxy", "snr_impr_db", "n"]


def mel_snr_improvement(clean: np.ndarray, noisy: np.ndarray, enhanced: np.ndarray) -> float:
    """Output minus input Mel-domain SNR in dB; exact reconstruction is capped at 99 dB."""
    clean, noisy, enhanced = (np.asarray(a, dtype=np.float64) for a in (clean, noisy, enhanced))
    if not clean.shape == noisy.shape == enhanced.shape:
        raise ValueError("shape mismatch")
    e_x = float(np.sum(clean**2))
    err_out = float(np.sum((enhanced - clean) ** 2))
    err_in = float(np.sum((noisy - clean) ** 2))
    if err_out == 0.0:
        return SNR_CAP_DB
    if err_in == 0.0:
        return -SNR_CAP_DB if err_out > 0 else 0.0
    val = 10.0 * math.log10(e_x / err_out) - 10.0 * math.log10(e_x / err_in)
    return float(min(val, SNR_CAP_DB))


@dataclass
class SweepRow:
    alpha: float | str
    beta: float
    distortion: float
    residual: float
    l_asr_proxy: float
    mel_snr_improvement_db: float
    n_examples: int

    def as_csv(self) -> list[str]:
        a = self.alpha if isinstance(self.alpha, str) else repr(float(self.alpha))
        return [a, repr(float(self.beta)), repr(self.distortion), repr(self.residual),
                repr(self.l_asr_proxy), repr(self.mel_snr_improvement_db), str(self.n_examples)]


def write_sweep_csv(path: str | Path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow(r.as_csv())


def eval_examples(cfg: ExperimentConfig, stats: FeatureStats, level_db: float, n: int | None = None,
                  seed: int | None = None) -> list[TrainingExample]:
    n = cfg.eval.n_per_bucket if n is None else n
    seed = cfg.eval.seed if seed is None else seed
    scenes = bucket_scenes(cfg.simulator, cfg.feature, level_db, n, seed)
    return [scene_to_example(s, stats, cfg.feature) for s in scenes]


def default_stats(cfg: ExperimentConfig) -> FeatureStats:
    """Stats over the configured training pool, for sources without a checkpoint."""
    return corpus_stats(scene_pool(cfg.simulator, cfg.feature))


def per_example_asr_loss(batch: Batch, feats: np.ndarray, frozen) -> np.ndarray:
    with ad.no_grad():
        return asr_loss(batch.clean_features, feats, frozen, axis=(-2, -1)).data


def baseline_features(batch: Batch) -> np.ndarray:
    """Unenhanced ASR features of the noisy input (mask = 1)."""
    with ad.no_grad():
        return enhanced_features(ad.Tensor(batch.noisy), batch.asr_mean, batch.asr_std).data


def _summaries(batch: Batch, m_bar: np.ndarray, feats: np.ndarray, frozen, clean, noise) -> dict:
    dist, resid, impr = [], [], []
    for i in range(len(batch)):
        d, r = distortion_residual(clean[i], noise[i], m_bar[i])
        dist.append(d)
        resid.append(r)
        impr.append(mel_snr_improvement(clean[i], batch.noisy[i], batch.noisy[i] * m_bar[i]))
    return {
        "distortion": float(np.mean(dist)),
        "residual": float(np.mean(resid)),
        "l_asr_proxy": float(np.mean(per_example_asr_loss(batch, feats, frozen))),
        "snr_impr_db": float(np.mean(impr)),
    }


def oracle_rows(examples: Sequence[TrainingExample], alphas: Sequence[float], beta: float, frozen) -> list[SweepRow]:
    batch = Batch.from_examples(examples)
    clean = np.stack([ex.clean_stacked for ex in examples])
    noise = np.stack([ex.noise_stacked for ex in examples])
    irm = ideal_ratio_mask(clean, noise)
    rows = []
    for a in alphas:
        m_bar = oracle_postprocess(irm, a, beta)
        with ad.no_grad():
            feats = enhanced_features(ad.Tensor(batch.noisy * m_bar), batch.asr_mean, batch.asr_std).data
        s = _summaries(batch, m_bar, feats, frozen, clean, noise)
        rows.append(SweepRow(float(a), beta, s["distortion"], s["residual"], s["l_asr_proxy"], s["snr_impr_db"], len(batch)))
    return rows


def model_rows(examples: Sequence[TrainingExample], params: FrontendParams, cfg: ExperimentConfig,
               modes: Sequence, beta: float) -> list[SweepRow]:
    batch = Batch.from_examples(examples)
    clean = np.stack([ex.clean_stacked for ex in examples])
    noise = np.stack([ex.noise_stacked for ex in examples])
    rows = []
    for mode in modes:
        with ad.no_grad():
            out = frontend_forward(batch.inputs, batch.noisy, batch.asr_mean, batch.asr_std, params, cfg.model, mode, beta)
        s = _summaries(batch, out.m_bar.data, out.asr_features.data, params.frozen_asr, clean, noise)
        label = mode if isinstance(mode, str) else float(mode)
        rows.append(SweepRow(label, beta, s["distortion"], s["residual"], s["l_asr_proxy"], s["snr_impr_db"], len(batch)))
    return rows


def sweep_alpha(
    cfg: ExperimentConfig,
    alphas: Sequence[float] | None = None,
    beta: float = DEFAULT_BETA,
    checkpoint: str | Path | None = None,
    level_db: float | None = None,
    include_predicted: bool = False,
) -> list[SweepRow]:
    """Fixed-alpha sweep using either oracle masks (no checkpoint) or a trained model."""
    alphas = list(cfg.eval.sweep_alphas if alphas is None else alphas)
    if not alphas:
        raise ValueError("alpha grid is empty")
    for a in alphas:
        if not 0.0 < a <= 1.0:
            raise ValueError(f"sweep alphas must lie in (0, 1], got {a}")
    level = cfg.eval.sweep_level_db if level_db is None else level_db
    if checkpoint is None:
        examples = eval_examples(cfg, default_stats(cfg), level)
        return oracle_rows(examples, alphas, beta, init_frozen_asr(cfg.model))
    ckpt = read_training_checkpoint(checkpoint)
    model_cfg = build_config(ckpt.meta["config"])
    examples = eval_examples(model_cfg, ckpt.stats, level, cfg.eval.n_per_bucket, cfg.eval.seed)
    modes: list = list(alphas)
    if include_predicted:
        modes.append(PREDICTED)
    return model_rows(examples, ckpt.params, model_cfg, modes, beta)


def evaluate(
    checkpoint: str | Path,
    cfg: ExperimentConfig | None = None,
    alpha: str | float = PREDICTED,
    beta: float | None = None,
) -> dict:
    """Per-bucket proxy metrics for a checkpoint.

    ``cfg`` supplies the eval section; the model/feature/simulator sections
    always come from the checkpoint, and a mismatch in geometry is an error.
    """
    ckpt = read_training_checkpoint(checkpoint)
    model_cfg = build_config(ckpt.meta["config"])
    if cfg is not None:
        _check_geometry(cfg, model_cfg)
    ev = (cfg or model_cfg).eval
    beta = model_cfg.model.beta if beta is None else beta
    levels = ev.snr_buckets if model_cfg.model.mode == ENHANCEMENT else ev.ser_buckets
    buckets = {}
    for level in levels:
        examples = eval_examples(model_cfg, ckpt.stats, level, ev.n_per_bucket, ev.seed)
        batch = Batch.from_examples(examples)
        clean = np.stack([ex.clean_stacked for ex in examples])
        noise = np.stack([ex.noise_stacked for ex in examples])
        with ad.no_grad():
            out = frontend_forward(batch.inputs, batch.noisy, batch.asr_mean, batch.asr_std,
                                   ckpt.params, model_cfg.model, alpha, beta)
            l_irm = mask_loss(batch.target, out.m_hat, axis=(-2, -1)).data
        s = _summaries(batch, out.m_bar.data, out.asr_features.data, ckpt.params.frozen_asr, clean, noise)
        s["l_irm"] = float(np.mean(l_irm))
        s["l_asr_baseline"] = float(np.mean(per_example_asr_loss(batch, baseline_features(batch), ckpt.params.frozen_asr)))
        track = out.alpha_track
        s["alpha_mean"] = float(np.mean(track))
        s["alpha_std"] = float(np.std(track))
        s["n"] = len(batch)
        buckets[_level_key(level)] = s
    return {
        "checkpoint_step": ckpt.step,
        "mode": model_cfg.model.mode,
        "alpha": alpha if isinstance(alpha, str) else float(alpha),
        "beta": beta,
        "buckets": buckets,
    }


def _level_key(level: float) -> str:
    return f"{level:+g}dB"


_GEOMETRY = {
    "feature": ("sample_rate", "window", "hop", "n_mels", "fmin", "fmax", "stack", "subsample"),
    "model": ("layers", "units", "ffn_dim", "conv_kernel", "left_context", "mask_dim", "mode", "asr_hidden", "asr_seed"),
}


def _check_geometry(cfg: ExperimentConfig, model_cfg: ExperimentConfig) -> None:
    a, b = cfg.to_dict(), model_cfg.to_dict()
    bad = [f"{s}.{k}" for s, keys in _GEOMETRY.items() for k in keys if a[s][k] != b[s][k]]
    if bad:
        raise ConfigError(f"config does not match checkpoint geometry: {', '.join(bad)}")


def dump_json(path: str | Path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
