import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from conftest import grid_mesh, random_splats
from uvsplat.densify import (
    DegenerateModelError,
    densify_sample,
    densify_threshold_baseline,
    prune,
    random_barycentric,
    reset_opacity,
    selection_probabilities,
)
from uvsplat.optim import Adam
from uvsplat.raster import ImportanceAccumulator
from uvsplat.splats import logit, sigmoid


def _acc(values):
    values = np.asarray(values, dtype=np.float64)
    return ImportanceAccumulator(values.copy(), np.ones(len(values), dtype=np.int64))


def test_selection_probabilities_and_frequencies():
    assert np.allclose(selection_probabilities([1, 1, 2]), [0.25, 0.25, 0.5])
    mesh = grid_mesh(3)
    s = random_splats(mesh, 3)
    grown, parents = densify_sample(s, _acc([1, 1, 2]), 100_000, np.random.default_rng(0))
    freq = np.bincount(parents, minlength=3) / 100_000
    assert np.all(np.abs(freq - [0.25, 0.25, 0.5]) <= 0.01)
    assert len(grown) == 100_003


def test_barycentric_normalisation():
    w = np.array([[0.5, 0.5, 0.5]])
    assert np.allclose(w / w.sum(), 1 / 3)
    b = random_barycentric(1000, np.random.default_rng(1))
    assert np.all(b >= 0) and np.allclose(b.sum(axis=1), 1, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=2, max_size=8).filter(lambda v: sum(x > 1e-3 for x in v) >= 2),
       st.integers(0, 2**31 - 1))
def test_multinomial_sampler_goodness_of_fit(importance, seed):
    mesh = grid_mesh(3)
    s = random_splats(mesh, len(importance))
    draws = 100_000
    _, parents = densify_sample(s, _acc(importance), draws, np.random.default_rng(seed))
    p = selection_probabilities(importance)
    observed = np.bincount(parents, minlength=len(p))
    nz = p > 0
    assert observed[~nz].sum() == 0
    assert chisquare(observed[nz], p[nz] * draws).pvalue > 1e-3


def test_densify_children_inherit_and_accumulator_resets():
    mesh = grid_mesh(4)
    s = random_splats(mesh, 12)
    acc = _acc(np.arange(12, dtype=float))
    grown, parents = densify_sample(s, acc, 50, np.random.default_rng(2))
    assert len(grown) == len(s) + 50
    child = grown.take(np.arange(12, 62))
    for name in ("face", "offset", "quat", "log_scale", "opacity_logit", "color"):
        assert np.array_equal(getattr(child, name), getattr(s, name)[parents])
    assert np.allclose(child.bary.sum(axis=1), 1)
    assert len(acc) == 62 and np.all(acc.grad_norm_sum == 0) and np.all(acc.observation_count == 0)


def test_densify_skips_when_importance_is_zero():
    s = random_splats(grid_mesh(3), 5)
    grown, parents = densify_sample(s, _acc(np.zeros(5)), 10, np.random.default_rng(0))
    assert grown is s and len(parents) == 0


def test_threshold_baseline():
    mesh = grid_mesh(4)
    s = random_splats(mesh, 6)
    s.log_scale = np.log(np.array([[0.1] * 3, [0.2] * 3, [0.3] * 3, [0.4] * 3, [0.5] * 3, [0.6] * 3]))
    out = densify_threshold_baseline(s, _acc(np.full(6, 1e-5)), 2e-4, mesh, np.random.default_rng(0))
    assert out is s
    imp = np.full(6, 1e-5)
    imp[0] = 1e-3  # smallest splat: one verbatim clone
    out = densify_threshold_baseline(s, _acc(imp), 2e-4, mesh, np.random.default_rng(0))
    assert len(out) == 7
    assert np.array_equal(out.bary[6], s.bary[0])
    imp = np.full(6, 1e-5)
    imp[5] = 1e-3  # largest splat: replaced by two smaller children
    out = densify_threshold_baseline(s, _acc(imp), 2e-4, mesh, np.random.default_rng(0))
    assert len(out) == 7
    assert np.allclose(out.log_scale[-2:], s.log_scale[5] - np.log(1.6))
    with pytest.raises(ValueError):
        densify_threshold_baseline(s, _acc(imp), 0.0, mesh, np.random.default_rng(0))


def test_prune():
    s = random_splats(grid_mesh(3), 5)
    s.opacity_logit = np.zeros(5)
    kept, removed = prune(s, 5e-3)
    assert len(kept) == 5 and len(removed) == 0
    s.opacity_logit[2] = logit(1e-4)
    kept, removed = prune(s, 5e-3)
    assert list(removed) == [2] and len(kept) == 4
    assert np.all(sigmoid(kept.opacity_logit) >= 5e-3)
    s.opacity_logit[:] = logit(1e-4)
    with pytest.raises(DegenerateModelError):
        prune(s, 5e-3)


def test_reset_opacity():
    s = random_splats(grid_mesh(3), 2)
    s.opacity_logit = logit(np.array([0.5, 0.005]))
    reset_opacity(s)
    assert np.allclose(sigmoid(s.opacity_logit), [0.01, 0.005])


def test_adam_zero_gradient_is_a_no_op_and_moments_follow_rows():
    opt = Adam({"a": 0.1})
    p = {"a": np.arange(6.0).reshape(3, 2)}
    out = opt.step(p, {"a": np.zeros((3, 2))})
    assert np.array_equal(out["a"], p["a"])
    fresh = Adam({"a": 0.1}).step(p, {"a": np.ones((3, 2))})
    assert np.allclose(fresh["a"], p["a"] - 0.1)
    out = opt.step(out, {"a": np.ones((3, 2))})
    opt.extend("a", 2)
    assert opt.m["a"].shape == (5, 2) and np.all(opt.m["a"][3:] == 0)
    opt.take("a", [0, 4])
    assert opt.m["a"].shape == (2, 2)
    opt.reset("a")
    assert np.all(opt.m["a"] == 0)
