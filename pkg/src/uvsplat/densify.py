"""Splat population control: importance-sampled densification, the threshold
clone/split baseline, opacity pruning and opacity reset."""
from __future__ import annotations

import logging

import numpy as np

from .mesh import TemplateMesh
from .raster import ImportanceAccumulator
from .splats import SplatSet, logit, sigmoid

log = logging.getLogger(__name__)

OPACITY_RESET_VALUE = 0.01
SPLIT_FACTOR = 1.6


class DegenerateModelError(RuntimeError):
    pass


def selection_probabilities(importance: np.ndarray) -> np.ndarray:
    importance = np.asarray(importance, dtype=np.float64)
    return importance / importance.sum()


def random_barycentric(count: int, rng: np.random.Generator) -> np.ndarray:
    """Normalized i.i.d. U(0,1) triples."""
    w = rng.random((count, 3))
    return w / w.sum(axis=1, keepdims=True)


def densify_sample(splats: SplatSet, importance: ImportanceAccumulator, count: int,
                   rng: np.random.Generator, mode: str = "mean") -> tuple[SplatSet, np.ndarray]:
    """Append ``count`` splats drawn (with replacement) proportionally to importance.

    Each new splat lives on its parent's face at freshly drawn barycentrics
    and copies every other attribute. The accumulator is reset globally.
    Returns the new set and the parent indices.
    """
    weights = importance.importance(mode)
    total = weights.sum()
    if not total > 0:
        log.info("densification skipped: all importances are zero")
        importance.reset(len(splats))
        return splats, np.zeros(0, dtype=np.int64)
    parents = rng.choice(len(splats), size=count, replace=True, p=selection_probabilities(weights))
    children = splats.take(parents)
    children.bary = random_barycentric(count, rng)
    grown = splats.concat(children)
    importance.reset(len(grown))
    return grown, parents


def densify_threshold_baseline(splats: SplatSet, importance: ImportanceAccumulator, tau_pos: float,
                               mesh: TemplateMesh, rng: np.random.Generator) -> SplatSet:
    """Clone/split splats whose mean gradient norm exceeds ``tau_pos``.

    Small splats (max local scale at or below the median) are cloned verbatim;
    large ones are replaced by two children with scales divided by 1.6 whose
    barycentrics are jittered by the parent's size relative to the face.
    """
    if tau_pos <= 0:
        raise ValueError("tau_pos must be positive")
    grad = importance.mean()
    selected = grad > tau_pos
    if not selected.any():
        return splats
    size = np.exp(splats.log_scale.max(axis=1))
    small = size <= np.median(size)
    clone_idx = np.nonzero(selected & small)[0]
    split_idx = np.nonzero(selected & ~small)[0]

    children = splats.take(np.repeat(split_idx, 2))
    children.log_scale = children.log_scale - np.log(SPLIT_FACTOR)
    v = mesh.vertices[mesh.faces[children.face]]
    edge = np.linalg.norm(v[:, 1] - v[:, 0], axis=1) + np.linalg.norm(v[:, 2] - v[:, 0], axis=1)
    sigma = np.repeat(size[split_idx], 2) / np.maximum(0.5 * edge, 1e-12)
    jitter = children.bary + rng.normal(size=children.bary.shape) * sigma[:, None]
    jitter = np.clip(jitter, 0, None) + 1e-12
    children.bary = jitter / jitter.sum(axis=1, keepdims=True)

    keep = np.ones(len(splats), dtype=bool)
    keep[split_idx] = False
    out = splats.take(keep).concat(splats.take(clone_idx)).concat(children)
    importance.reset(len(out))
    return out


def prune(splats: SplatSet, threshold: float = 5e-3) -> tuple[SplatSet, np.ndarray]:
    """Drop splats whose opacity is below ``threshold``; returns (kept set, removed indices)."""
    low = sigmoid(splats.opacity_logit) < threshold
    if low.all():
        raise DegenerateModelError("pruning would remove every splat")
    return splats.take(~low), np.nonzero(low)[0]


def reset_opacity(splats: SplatSet, value: float = OPACITY_RESET_VALUE) -> None:
    """Clamp every opacity to at most ``value`` (in place)."""
    splats.opacity_logit = np.minimum(splats.opacity_logit, logit(value))
