"""Tile-based alpha compositing of projected splats with an analytic backward pass.

Splats are binned into 16x16 pixel tiles, sorted front to back per tile
(ties broken by splat index) and composited per pixel. Each tile writes its
own gradient rows (one per tile/splat pair), which are reduced in tile order,
so results do not depend on the number of threads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .mesh import DeformState, deform_backward
from .splats import (
    Camera,
    Projected,
    SplatSet,
    WorldSplats,
    globalize,
    globalize_backward,
    project_all,
    project_backward,
    sigmoid,
)

TILE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_EPS = 1e-4


@numba.njit(parallel=True, cache=True)
def _forward_kernel(tile_start, tile_end, entry_splat, mean2d, conic, opacity, color, bg,
                    alpha_min, width, height, tiles_x, image, final_t, n_contrib, entry_hit):
    for tile in numba.prange(len(tile_start)):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        s = tile_start[tile]
        e = tile_end[tile]
        for py in range(ty * 16, min(ty * 16 + 16, height)):
            y = py + 0.5
            for px in range(tx * 16, min(tx * 16 + 16, width)):
                x = px + 0.5
                t = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                last = 0
                for k in range(s, e):
                    i = entry_splat[k]
                    dx = x - mean2d[i, 0]
                    dy = y - mean2d[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    a = opacity[i] * math.exp(power)
                    if a > 0.99:
                        a = 0.99
                    if a < alpha_min:
                        continue
                    test_t = t * (1.0 - a)
                    if test_t < 1e-4:
                        break
                    w = a * t
                    c0 += color[i, 0] * w
                    c1 += color[i, 1] * w
                    c2 += color[i, 2] * w
                    t = test_t
                    last = k - s + 1
                    entry_hit[k] = True
                image[py, px, 0] = c0 + t * bg[0]
                image[py, px, 1] = c1 + t * bg[1]
                image[py, px, 2] = c2 + t * bg[2]
                final_t[py, px] = t
                n_contrib[py, px] = last


@numba.njit(parallel=True, cache=True)
def _backward_kernel(tile_start, entry_splat, mean2d, conic, opacity, color, bg, alpha_min,
                     width, height, tiles_x, final_t, n_contrib, d_image,
                     d_mean2d, d_conic, d_opacity, d_color):
    for tile in numba.prange(len(tile_start)):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        s = tile_start[tile]
        for py in range(ty * 16, min(ty * 16 + 16, height)):
            y = py + 0.5
            for px in range(tx * 16, min(tx * 16 + 16, width)):
                x = px + 0.5
                g0 = d_image[py, px, 0]
                g1 = d_image[py, px, 1]
                g2 = d_image[py, px, 2]
                t = final_t[py, px]
                acc0 = bg[0]
                acc1 = bg[1]
                acc2 = bg[2]
                for k in range(s + n_contrib[py, px] - 1, s - 1, -1):
                    i = entry_splat[k]
                    dx = x - mean2d[i, 0]
                    dy = y - mean2d[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    gauss = math.exp(power)
                    raw = opacity[i] * gauss
                    a = raw
                    if a > 0.99:
                        a = 0.99
                    if a < alpha_min:
                        continue
                    t = t / (1.0 - a)
                    w = a * t
                    d_color[k, 0] += w * g0
                    d_color[k, 1] += w * g1
                    d_color[k, 2] += w * g2
                    d_a = t * ((color[i, 0] - acc0) * g0 + (color[i, 1] - acc1) * g1
                               + (color[i, 2] - acc2) * g2)
                    acc0 = a * color[i, 0] + (1.0 - a) * acc0
                    acc1 = a * color[i, 1] + (1.0 - a) * acc1
                    acc2 = a * color[i, 2] + (1.0 - a) * acc2
                    if raw > 0.99:
                        continue
                    d_opacity[k] += gauss * d_a
                    d_power = a * d_a
                    d_mean2d[k, 0] += d_power * (conic[i, 0] * dx + conic[i, 1] * dy)
                    d_mean2d[k, 1] += d_power * (conic[i, 1] * dx + conic[i, 2] * dy)
                    d_conic[k, 0] += -0.5 * dx * dx * d_power
                    d_conic[k, 1] += -dx * dy * d_power
                    d_conic[k, 2] += -0.5 * dy * dy * d_power


@dataclass
class ImportanceAccumulator:
    """Running sum of per-splat world-space position-gradient norms."""

    grad_norm_sum: np.ndarray
    observation_count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "ImportanceAccumulator":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.grad_norm_sum)

    def add(self, d_mean: np.ndarray, observed: np.ndarray) -> None:
        self.grad_norm_sum += np.linalg.norm(d_mean, axis=1)
        self.observation_count += observed.astype(np.int64)

    def mean(self) -> np.ndarray:
        return np.where(self.observation_count > 0,
                        self.grad_norm_sum / np.maximum(self.observation_count, 1), 0.0)

    def importance(self, mode: str = "mean") -> np.ndarray:
        if mode == "sum":
            return self.grad_norm_sum.copy()
        if mode == "mean":
            return self.mean()
        raise ValueError(f"unknown importance mode {mode!r}")

    def reset(self, n: int | None = None) -> None:
        n = len(self) if n is None else n
        self.grad_norm_sum = np.zeros(n)
        self.observation_count = np.zeros(n, dtype=np.int64)

    def take(self, index) -> None:
        self.grad_norm_sum = self.grad_norm_sum[index]
        self.observation_count = self.observation_count[index]


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    alpha_map: np.ndarray  # (H, W)
    final_t: np.ndarray
    n_contrib: np.ndarray  # entries processed per pixel in its tile list
    diagnostics: dict
    # bookkeeping for backward
    splats: SplatSet | None = None
    state: DeformState | None = None
    cam: Camera | None = None
    background: np.ndarray | None = None
    world: WorldSplats | None = None
    projected: Projected | None = None
    conic: np.ndarray | None = None
    opacity: np.ndarray | None = None
    tile_start: np.ndarray | None = None
    tile_end: np.ndarray | None = None
    entry_splat: np.ndarray | None = None
    entry_hit: np.ndarray | None = None
    alpha_min: float = ALPHA_MIN
    tiles_x: int = 0

    def contributors(self, row: int, col: int) -> list[tuple[int, float]]:
        """``(splat index, weight alpha_i * T_i)`` in compositing order for one pixel."""
        tile = (row // TILE) * self.tiles_x + col // TILE
        s = self.tile_start[tile]
        out = []
        t = 1.0
        x, y = col + 0.5, row + 0.5
        for k in range(s, s + int(self.n_contrib[row, col])):
            i = int(self.entry_splat[k])
            dx = x - self.projected.mean2d[i, 0]
            dy = y - self.projected.mean2d[i, 1]
            c = self.conic[i]
            power = -0.5 * (c[0] * dx * dx + c[2] * dy * dy) - c[1] * dx * dy
            a = min(ALPHA_MAX, self.opacity[i] * math.exp(power))
            if a < self.alpha_min:
                continue
            out.append((i, a * t))
            t *= 1.0 - a
        return out

    def dominant_splat(self) -> np.ndarray:
        """Per-pixel index of the splat with the largest compositing weight (-1 if none)."""
        h, w = self.final_t.shape
        out = np.full((h, w), -1, dtype=np.int64)
        for r in range(h):
            for c in range(w):
                contrib = self.contributors(r, c)
                if contrib:
                    out[r, c] = max(contrib, key=lambda iw: iw[1])[0]
        return out


@dataclass
class SplatGrads:
    color: np.ndarray
    opacity_logit: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    offset: np.ndarray
    delta_pose: np.ndarray
    delta_expr: np.ndarray
    mean: np.ndarray  # dL/d(world position)
    vertices: np.ndarray  # dL/d(posed vertices)
    observed: np.ndarray  # splats that contributed to at least one pixel

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "color": self.color, "opacity_logit": self.opacity_logit, "log_scale": self.log_scale,
            "quat": self.quat, "offset": self.offset,
            "delta_pose": self.delta_pose, "delta_expr": self.delta_expr,
        }


def _conic(cov2d: np.ndarray) -> np.ndarray:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=1)


def _bin_tiles(mean2d, cov2d, depth, opacity, active, width, height, alpha_min):
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    idx = np.nonzero(active)[0]
    m = 2.0 * np.log(opacity[idx] / alpha_min)
    ex = np.sqrt(m * cov2d[idx, 0, 0]) + 1.0
    ey = np.sqrt(m * cov2d[idx, 1, 1]) + 1.0
    mx, my = mean2d[idx, 0], mean2d[idx, 1]
    jx0 = np.ceil(mx - ex - 0.5)
    jx1 = np.floor(mx + ex - 0.5)
    jy0 = np.ceil(my - ey - 0.5)
    jy1 = np.floor(my + ey - 0.5)
    onscreen = (jx1 >= 0) & (jx0 <= width - 1) & (jy1 >= 0) & (jy0 <= height - 1)
    idx = idx[onscreen]
    tx0 = (np.clip(jx0[onscreen], 0, width - 1) // TILE).astype(np.int64)
    tx1 = (np.clip(jx1[onscreen], 0, width - 1) // TILE).astype(np.int64)
    ty0 = (np.clip(jy0[onscreen], 0, height - 1) // TILE).astype(np.int64)
    ty1 = (np.clip(jy1[onscreen], 0, height - 1) // TILE).astype(np.int64)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = nx * ny
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(idx)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_x = tx0[owner] + local % nx[owner]
    tile_y = ty0[owner] + local // nx[owner]
    tile_id = tile_y * tiles_x + tile_x
    splat = idx[owner]
    order = np.lexsort((splat, depth[splat], tile_id))
    tile_id = tile_id[order]
    entry_splat = np.ascontiguousarray(splat[order])
    n_tiles = tiles_x * tiles_y
    tile_start = np.searchsorted(tile_id, np.arange(n_tiles), side="left").astype(np.int64)
    tile_end = np.searchsorted(tile_id, np.arange(n_tiles), side="right").astype(np.int64)
    return tiles_x, tile_start, tile_end, entry_splat


def rasterize(mean2d, cov2d, depth, opacity, color, active, width, height, background,
              alpha_min: float = ALPHA_MIN):
    """Composite already-projected splats. Returns (image, final_t, n_contrib, bins, conic)."""
    conic = np.zeros((len(mean2d), 3))
    conic[active] = _conic(cov2d[active])
    tiles_x, tile_start, tile_end, entry_splat = _bin_tiles(
        mean2d, cov2d, depth, opacity, active, width, height, alpha_min)
    image = np.empty((height, width, 3))
    final_t = np.empty((height, width))
    n_contrib = np.empty((height, width), dtype=np.int64)
    entry_hit = np.zeros(len(entry_splat), dtype=np.bool_)
    _forward_kernel(tile_start, tile_end, entry_splat, np.ascontiguousarray(mean2d), conic,
                    np.ascontiguousarray(opacity), np.ascontiguousarray(color),
                    np.asarray(background, dtype=np.float64), float(alpha_min), width, height,
                    tiles_x, image, final_t, n_contrib, entry_hit)
    return image, final_t, n_contrib, (tiles_x, tile_start, tile_end, entry_splat, entry_hit), conic


def render(splats: SplatSet, state: DeformState, cam: Camera, background=(0.0, 0.0, 0.0),
           alpha_min: float = ALPHA_MIN) -> RenderOutput:
    """Globalize, project, cull, bin and composite the splats for one camera."""
    background = np.asarray(background, dtype=np.float64)
    world = globalize(splats, state)
    proj = project_all(world.mean, world.cov, cam)
    opacity = sigmoid(splats.opacity_logit)
    finite = (
        np.isfinite(world.mean).all(axis=1)
        & np.isfinite(proj.cov2d).all(axis=(1, 2))
        & np.isfinite(opacity)
        & np.isfinite(splats.color).all(axis=1)
    )
    active = proj.valid & finite & (opacity >= alpha_min)
    image, final_t, n_contrib, bins, conic = rasterize(
        proj.mean2d, proj.cov2d, proj.depth, opacity, splats.color, active,
        cam.width, cam.height, background, alpha_min)
    tiles_x, tile_start, tile_end, entry_splat, entry_hit = bins
    diagnostics = {
        "non_finite": int((~finite).sum()),
        "culled_near": int((~proj.valid).sum()),
        "tile_entries": int(len(entry_splat)),
    }
    return RenderOutput(
        image, 1.0 - final_t, final_t, n_contrib, diagnostics,
        splats, state, cam, background, world, proj, conic, opacity,
        tile_start, tile_end, entry_splat, entry_hit, alpha_min, tiles_x,
    )


def backward(out: RenderOutput, d_image: np.ndarray,
             accumulator: ImportanceAccumulator | None = None) -> SplatGrads:
    """Analytic gradients of ``sum(d_image * image)`` w.r.t. every splat field and
    the blendshape corrections; optionally accumulates position-gradient norms."""
    if out.entry_splat is None:
        raise RuntimeError("backward() needs the bookkeeping of a render() call")
    splats, cam, proj = out.splats, out.cam, out.projected
    n = len(splats)
    ne = len(out.entry_splat)
    d_mean2d_e = np.zeros((ne, 2))
    d_conic_e = np.zeros((ne, 3))
    d_opacity_e = np.zeros(ne)
    d_color_e = np.zeros((ne, 3))
    _backward_kernel(out.tile_start, out.entry_splat, np.ascontiguousarray(proj.mean2d), out.conic,
                     out.opacity, np.ascontiguousarray(splats.color), out.background, float(out.alpha_min),
                     cam.width, cam.height, out.tiles_x, out.final_t, out.n_contrib,
                     np.ascontiguousarray(d_image, dtype=np.float64),
                     d_mean2d_e, d_conic_e, d_opacity_e, d_color_e)
    es = out.entry_splat

    def reduce(values):
        if values.ndim == 1:
            return np.bincount(es, weights=values, minlength=n)
        return np.stack([np.bincount(es, weights=values[:, j], minlength=n)
                         for j in range(values.shape[1])], axis=1)

    d_mean2d = reduce(d_mean2d_e)
    d_conic = reduce(d_conic_e)
    d_opacity = reduce(d_opacity_e)
    d_color = reduce(d_color_e)
    observed = np.bincount(es, weights=out.entry_hit.astype(np.float64), minlength=n) > 0

    # conic = inverse(cov2d); symmetric split of the off-diagonal gradient
    c = np.zeros((n, 2, 2))
    c[:, 0, 0], c[:, 0, 1], c[:, 1, 0], c[:, 1, 1] = out.conic[:, 0], out.conic[:, 1], out.conic[:, 1], out.conic[:, 2]
    g = np.zeros((n, 2, 2))
    g[:, 0, 0] = d_conic[:, 0]
    g[:, 0, 1] = g[:, 1, 0] = 0.5 * d_conic[:, 1]
    g[:, 1, 1] = d_conic[:, 2]
    d_cov2d = -c @ g @ c

    world = out.world
    d_mean, d_cov = project_backward(proj, cam, world.cov, d_mean2d, d_cov2d)
    grads, d_vertices = globalize_backward(splats, out.state, world, d_mean, d_cov)
    d_delta_pose, d_delta_expr = deform_backward(out.state, d_vertices)
    d_logit = d_opacity * out.opacity * (1.0 - out.opacity)
    if accumulator is not None:
        accumulator.add(d_mean, observed)
    return SplatGrads(
        d_color, d_logit, grads["log_scale"], grads["quat"], grads["offset"],
        d_delta_pose, d_delta_expr, d_mean, d_vertices, observed,
    )
