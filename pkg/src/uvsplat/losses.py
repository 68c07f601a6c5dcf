"""Training objective: L1 + perceptual proxy, scale-ratio, Laplacian and anchor terms."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .metrics import ssim_and_grad

DEFAULT_LAMBDAS = (0.1, 100.0, 100.0, 0.1)


class PerceptualLoss(Protocol):
    """``(render, target) -> (value, d value / d render)``."""

    def __call__(self, render: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]: ...


def dssim_loss(render: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """``(1 - SSIM) / 2`` and its gradient."""
    s, grad = ssim_and_grad(render, target)
    return (1.0 - s) / 2.0, -0.5 * grad


def l1_loss(render: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = render - target
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def image_loss(render: np.ndarray, target: np.ndarray,
               perceptual: PerceptualLoss = dssim_loss) -> tuple[float, float]:
    """``(l1, perceptual_proxy)`` for two images of the same shape."""
    render = np.asarray(render, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if render.shape != target.shape:
        raise ValueError(f"resolution mismatch: {render.shape} vs {target.shape}")
    return l1_loss(render, target)[0], perceptual(render, target)[0]


def scale_loss(log_scale: np.ndarray, r_ratio: float) -> tuple[float, np.ndarray]:
    """Mean hinge on the max/min axis ratio of the activated scales, with gradient
    w.r.t. the log scales."""
    if r_ratio <= 1:
        raise ValueError("r_ratio must exceed 1")
    log_scale = np.asarray(log_scale, dtype=np.float64)
    n = len(log_scale)
    if n == 0:
        return 0.0, np.zeros_like(log_scale)
    imax = np.argmax(log_scale, axis=1)
    imin = np.argmin(log_scale, axis=1)
    rows = np.arange(n)
    ratio = np.exp(log_scale[rows, imax] - log_scale[rows, imin])
    excess = ratio - r_ratio
    active = excess > 0
    grad = np.zeros_like(log_scale)
    g = np.where(active, ratio / n, 0.0)
    np.add.at(grad, (rows, imax), g)
    np.add.at(grad, (rows, imin), -g)
    return float(np.maximum(excess, 0.0).sum() / n), grad


@dataclass
class LossReport:
    l1: float
    perceptual_proxy: float
    scale: float
    laplacian: float
    anchor: float
    total: float

    @classmethod
    def combine(cls, l1, perceptual_proxy, scale, laplacian, anchor, lambdas=DEFAULT_LAMBDAS) -> "LossReport":
        lam1, lam2, lam3, lam4 = lambdas
        total = l1 + lam1 * perceptual_proxy + lam2 * laplacian + lam3 * anchor + lam4 * scale
        return cls(float(l1), float(perceptual_proxy), float(scale), float(laplacian), float(anchor), float(total))

    def recompose(self, lambdas=DEFAULT_LAMBDAS) -> float:
        lam1, lam2, lam3, lam4 = lambdas
        return self.l1 + lam1 * self.perceptual_proxy + lam2 * self.laplacian + lam3 * self.anchor + lam4 * self.scale
