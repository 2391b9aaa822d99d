"""Ideal ratio masks, mask post-processing (scalar exponent + floor), masking."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import autodiff as ad
from .features import read_matrix_csv, write_matrix_csv

DEFAULT_BETA = 0.01
ORACLE_CLAMP = 1e-12


def ideal_ratio_mask(clean: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """X / (X + N) per bin, with 0/0 taken as 0."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {noise.shape}")
    total = clean + noise
    out = np.zeros_like(total)
    np.divide(clean, total, out=out, where=total > 0)
    return out


def postprocess(m_hat, alpha, beta: float = DEFAULT_BETA) -> ad.Tensor:
    """``max(m_hat ** alpha, beta)`` with alpha either a scalar or one value per frame.

    A per-frame alpha has shape ``(..., frames)`` and is broadcast across the
    mask dims of its frame. Inputs may be arrays or autodiff tensors.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must be in [0, 1), got {beta}")
    m_hat = ad.as_tensor(m_hat)
    if isinstance(alpha, ad.Tensor) or np.ndim(alpha) > 0:
        alpha = ad.as_tensor(alpha)
        if alpha.shape != m_hat.shape[:-1]:
            raise ValueError(
                f"per-frame alpha shape {alpha.shape} does not match mask frames {m_hat.shape[:-1]}"
            )
        alpha = ad.reshape(alpha, alpha.shape + (1,))
    else:
        alpha = float(alpha)
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"fixed alpha must be in [0, 1], got {alpha}")
    return ad.floor_max(ad.elementwise_pow(m_hat, alpha), beta)


def oracle_postprocess(mask: np.ndarray, alpha, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Post-process an oracle mask, which may contain exact zeros."""
    clamped = np.clip(mask, ORACLE_CLAMP, 1.0)
    with ad.no_grad():
        return postprocess(clamped, alpha, beta).data


def apply_mask(noisy, mask):
    """Element-wise masking; returns a tensor if either input is one."""
    if isinstance(noisy, ad.Tensor) or isinstance(mask, ad.Tensor):
        if noisy.shape != mask.shape:
            raise ValueError(f"shape mismatch: {noisy.shape} vs {mask.shape}")
        return ad.mul(noisy, mask)
    noisy = np.asarray(noisy, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if noisy.shape != mask.shape:
        raise ValueError(f"shape mismatch: {noisy.shape} vs {mask.shape}")
    return noisy * mask


def distortion_residual(clean: np.ndarray, noise: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """Split the masking error into speech distortion and residual noise energy.

    X_hat - X = X * (M - 1) + N * M, so distortion is ||X * (1 - M)||^2 and
    residual is ||N * M||^2.
    """
    clean, noise, mask = (np.asarray(a, dtype=np.float64) for a in (clean, noise, mask))
    if not clean.shape == noise.shape == mask.shape:
        raise ValueError(f"shape mismatch: {clean.shape}, {noise.shape}, {mask.shape}")
    distortion = float(np.sum((clean * (1.0 - mask)) ** 2))
    residual = float(np.sum((noise * mask) ** 2))
    return distortion, residual


def save_mask_csv(path: str | Path, mask: np.ndarray) -> None:
    write_matrix_csv(path, mask, prefix="m")


def load_mask_csv(path: str | Path) -> np.ndarray:
    mask = read_matrix_csv(path)
    if np.any(mask < 0) or np.any(mask > 1):
        raise ValueError(f"{path}: mask values outside [0, 1]")
    return mask
