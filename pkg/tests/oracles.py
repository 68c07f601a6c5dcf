"""Independent reference implementations used only by the tests."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

ALPHA_MAX = 0.99


def composite_bruteforce(mean2d, cov2d, depth, opacity, color, active, width, height, background,
                         alpha_min=1.0 / 255.0, t_eps=1e-4):
    """Per-pixel compositing over *all* splats, fully sorted by (depth, index), no tiling."""
    idx = np.nonzero(active)[0]
    order = idx[np.lexsort((idx, depth[idx]))]
    inv = np.linalg.inv(cov2d[order])
    image = np.empty((height, width, 3))
    ys, xs = np.mgrid[0:height, 0:width]
    for py, px in zip(ys.ravel(), xs.ravel()):
        d = np.array([px + 0.5, py + 0.5]) - mean2d[order]
        power = -0.5 * np.einsum("ni,nij,nj->n", d, inv, d)
        alpha = np.minimum(ALPHA_MAX, opacity[order] * np.exp(power))
        t = 1.0
        c = np.zeros(3)
        for a, col in zip(alpha, color[order]):
            if a < alpha_min:
                continue
            nt = t * (1 - a)
            if nt < t_eps:
                break
            c += col * a * t
            t = nt
        image[py, px] = c + t * np.asarray(background)
    return image


def ssim_reference(x, y, crop=5):
    """SSIM via scipy's Gaussian filter (truncated to an 11x11 window, zero padding)."""
    c1, c2 = 0.01**2, 0.03**2
    out = []
    for ch in range(x.shape[2]):
        a, b = x[..., ch], y[..., ch]
        f = lambda z: gaussian_filter(z, 1.5, truncate=5 / 1.5, mode="constant")
        mx, my = f(a), f(b)
        sxx = f(a * a) - mx * mx
        syy = f(b * b) - my * my
        sxy = f(a * b) - mx * my
        out.append(((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    m = np.stack(out, axis=-1)
    if crop:
        m = m[crop:-crop, crop:-crop]
    return float(m.mean())


def central_difference(f, x: np.ndarray, index, h: float) -> float:
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * h)
