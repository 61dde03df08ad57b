"""Training-side numerics: Dice + cross-entropy loss with its analytic
gradient, and the cosine-annealing learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynunet import softmax_channels
from .errors import ValidationError


@dataclass(frozen=True)
class LossConfig:
    squared_pred: bool = True
    include_background: bool = True
    smooth_num: float = 1e-5
    smooth_den: float = 1e-5
    ce_weight: float = 1.0

    def __post_init__(self):
        if self.smooth_num < 0 or self.smooth_den < 0:
            raise ValidationError("smoothing terms must be non-negative")


def _check(logits, target):
    z = np.asarray(logits, dtype=np.float64)
    g = np.asarray(target, dtype=np.float64)
    if z.ndim != 2 or z.shape != g.shape:
        raise ValidationError(f"logits {z.shape} and target {g.shape} must both be (C, N)")
    if z.shape[0] < 2 or z.shape[1] < 1:
        raise ValidationError("need at least 2 channels and 1 voxel")
    if not np.all((g == 0) | (g == 1)) or not np.all(g.sum(axis=0) == 1):
        raise ValidationError("target must be one-hot along the channel axis")
    return z, g


def _dice_parts(p, g, cfg):
    first = 0 if cfg.include_background else 1
    p, g = p[first:], g[first:]
    inter = (p * g).sum(axis=1)
    if cfg.squared_pred:
        denom = (p * p).sum(axis=1) + (g * g).sum(axis=1)
    else:
        denom = p.sum(axis=1) + g.sum(axis=1)
    return first, inter, denom


def dice_ce_loss(logits, target, cfg: LossConfig = LossConfig()) -> float:
    """Soft Dice loss (mean over channels) plus weighted cross-entropy.

    ``logits`` and ``target`` are ``(C, N)``; ``target`` is one-hot.
    """
    z, g = _check(logits, target)
    p = softmax_channels(z)
    _, inter, denom = _dice_parts(p, g, cfg)
    dice = 1.0 - np.mean((2.0 * inter + cfg.smooth_num) / (denom + cfg.smooth_den))
    # log-softmax straight from the logits keeps the CE term finite
    shifted = z - z.max(axis=0, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    ce = -np.mean((log_p * g).sum(axis=0))
    return float(dice + cfg.ce_weight * ce)


def dice_ce_grad(logits, target, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Analytic gradient of :func:`dice_ce_loss` with respect to the logits."""
    z, g = _check(logits, target)
    p = softmax_channels(z)
    C, N = z.shape
    first, inter, denom = _dice_parts(p, g, cfg)
    n_dice = C - first

    dl_dp = np.zeros_like(p)
    num = 2.0 * inter + cfg.smooth_num
    den = denom + cfg.smooth_den
    pp, gg = p[first:], g[first:]
    d_denom = 2.0 * pp if cfg.squared_pred else np.ones_like(pp)
    d_ratio = (2.0 * gg) / den[:, None] - (num / den**2)[:, None] * d_denom
    dl_dp[first:] = -d_ratio / n_dice

    # softmax Jacobian: dL/dz_k = p_k (dL/dp_k - sum_c p_c dL/dp_c)
    grad = p * (dl_dp - (p * dl_dp).sum(axis=0, keepdims=True))
    grad += cfg.ce_weight * (p - g) / N
    return grad


def cosine_annealing_lr(t: float, T: float, eta_max: float = 2e-4, eta_min: float = 1e-8) -> float:
    """``eta_min + (eta_max - eta_min) * (1 + cos(pi * t / T)) / 2``."""
    if T < 1:
        raise ValidationError("T must be >= 1")
    if not 0 <= t <= T:
        raise ValidationError(f"step t={t} outside [0, {T}]")
    if eta_min > eta_max:
        raise ValidationError("eta_min must not exceed eta_max")
    if t == 0:
        return float(eta_max)
    if t == T:
        return float(eta_min)
    return eta_min + (eta_max - eta_min) * (1.0 + math.cos(math.pi * t / T)) / 2.0


def central_difference_grad(logits, target, cfg: LossConfig = LossConfig(), h: float = 1e-5):
    """Numerical gradient of the loss by central differences."""
    z = np.array(logits, dtype=np.float64)
    out = np.zeros_like(z)
    for idx in np.ndindex(*z.shape):
        orig = z[idx]
        z[idx] = orig + h
        up = dice_ce_loss(z, target, cfg)
        z[idx] = orig - h
        down = dice_ce_loss(z, target, cfg)
        z[idx] = orig
        out[idx] = (up - down) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the largest numeric component."""
    scale = max(float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def gradient_check(instances: int = 100, seed: int = 0, cfg: LossConfig = LossConfig()) -> dict:
    """Compare analytic and finite-difference gradients on random problems."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        C = int(rng.integers(2, 4))
        N = int(rng.integers(1, 17))
        z = rng.normal(0.0, 2.0, size=(C, N))
        g = np.eye(C)[:, rng.integers(0, C, size=N)]
        err = relative_error(dice_ce_grad(z, g, cfg), central_difference_grad(z, g, cfg))
        worst = max(worst, err)
    return {"instances": instances, "max_rel_error": worst}
