"""PSNR and SSIM (11x11 Gaussian window, sigma 1.5) with the SSIM adjoint."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
WINDOW = 11
SIGMA = 1.5


def _gaussian_kernel(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


_KERNEL = _gaussian_kernel()


def _blur(img: np.ndarray) -> np.ndarray:
    # zero padding; the operator is self-adjoint because the kernel is symmetric
    out = convolve1d(img, _KERNEL, axis=0, mode="constant")
    return convolve1d(out, _KERNEL, axis=1, mode="constant")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return 10.0 * np.log10(1.0 / mse)


def _ssim_terms(x: np.ndarray, y: np.ndarray):
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    return (a1 * a2) / (b1 * b2), (mx, my, a1, a2, b1, b2)


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return _ssim_terms(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))[0]


def ssim(x: np.ndarray, y: np.ndarray, crop: bool = True) -> float:
    """Mean SSIM over pixels and channels.

    With ``crop`` the border of half a window is excluded, so only windows
    fully inside the image are averaged.
    """
    m = ssim_map(x, y)
    if crop:
        r = WINDOW // 2
        if m.shape[0] > 2 * r and m.shape[1] > 2 * r:
            m = m[r:-r, r:-r]
    return float(m.mean())


def ssim_and_grad(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Uncropped mean SSIM and its gradient with respect to ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    s, (mx, my, a1, a2, b1, b2) = _ssim_terms(x, y)
    scale = 1.0 / s.size
    den = b1 * b2
    g_m1 = scale * ((2 * my * a2 - 2 * my * a1) / den - s * (2 * mx / b1 - 2 * mx / b2))
    g_m2 = scale * (-s / b2)
    g_m3 = scale * (2 * a1 / den)
    grad = _blur(g_m1) + 2 * x * _blur(g_m2) + y * _blur(g_m3)
    return float(s.mean()), grad


@dataclass
class MetricsReport:
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    frames: list[int] = field(default_factory=list)

    def add(self, frame: int, render: np.ndarray, target: np.ndarray) -> None:
        self.frames.append(int(frame))
        self.psnr.append(psnr(render, target))
        self.ssim.append(ssim(render, target))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_dict(self) -> dict:
        return {
            "psnr": self.mean_psnr,
            "ssim": self.mean_ssim,
            "per_frame": [
                {"frame": f, "psnr": p, "ssim": s} for f, p, s in zip(self.frames, self.psnr, self.ssim)
            ],
        }
