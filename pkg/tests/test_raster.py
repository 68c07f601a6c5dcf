import numpy as np
import pytest

from conftest import grid_camera, grid_mesh, random_splats
from oracles import central_difference, composite_bruteforce
from uvsplat.mesh import deform
from uvsplat.raster import ImportanceAccumulator, RenderOutput, backward, render
from uvsplat.splats import Camera, SplatSet, globalize, project_all, sigmoid

BG = np.array([0.2, 0.4, 0.6])


def _scene(n=10, seed=0, logit_range=(-2.0, 0.0)):
    mesh = grid_mesh(4, seed=seed)
    s = random_splats(mesh, n, seed=seed)
    s.opacity_logit = np.random.default_rng(seed + 100).uniform(*logit_range, n)
    return mesh, s


def test_zero_splats_give_background():
    mesh = grid_mesh(4)
    empty = SplatSet.create(np.zeros(0, int), np.zeros((0, 3)))
    out = render(empty, deform(mesh), grid_camera(), BG)
    assert np.array_equal(out.image, np.broadcast_to(BG, out.image.shape))
    assert np.all(out.alpha_map == 0)


def test_single_opaque_splat_clamps_alpha():
    verts = np.array([[-1.0, -1, 0], [1, -1, 0], [0, 1, 0]])
    from uvsplat.mesh import TemplateMesh
    mesh = TemplateMesh(verts, [[0, 1, 2]], [[[0, 0], [1, 0], [0.5, 1]]])
    s = SplatSet.create([0], [[0.25, 0.25, 0.5]], log_scale=np.log(0.05), opacity=0.5)
    s.opacity_logit[:] = 40.0
    s.color[:] = [0.3, 0.6, 0.9]
    cam = Camera(40.0, 40.0, 15.5, 15.5, 32, 32, np.eye(4))
    cam.world_to_camera[2, 3] = 3.0  # splat centre lands on pixel (15, 15)
    mu = globalize(s, deform(mesh)).mean[0]
    assert np.allclose(project_all(mu[None], np.eye(3)[None], cam).mean2d[0], [15.5, 15.5])
    out = render(s, deform(mesh), cam, (0.0, 0.0, 0.0))
    assert np.allclose(out.image[15, 15], 0.99 * s.color[0], atol=1e-6)
    d_image = np.zeros_like(out.image)
    d_image[15, 15, 0] = 1.0
    g = backward(out, d_image)
    assert np.isclose(g.color[0, 0], 0.99, atol=1e-6)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_tile_renderer_matches_bruteforce(seed):
    mesh = grid_mesh(5, seed=seed)
    s = random_splats(mesh, 100, seed=seed)
    state = deform(mesh, [0.3, -0.2], [0.5])
    cam = grid_camera(32)
    out = render(s, state, cam, BG)
    w = globalize(s, state)
    p = project_all(w.mean, w.cov, cam)
    ref = composite_bruteforce(p.mean2d, p.cov2d, p.depth, sigmoid(s.opacity_logit), s.color,
                               p.valid, 32, 32, BG)
    assert np.max(np.abs(out.image - ref)) <= 1e-6


def test_alpha_plus_transmittance_is_one():
    mesh, s = _scene(60, logit_range=(-1, 4))
    out = render(s, deform(mesh), grid_camera(), BG)
    assert np.all(np.abs(out.alpha_map + out.final_t - 1) <= 1e-6)
    assert out.alpha_map.min() >= 0 and out.alpha_map.max() <= 1


def test_permuting_inputs_does_not_change_image():
    mesh, s = _scene(80, seed=4)
    state = deform(mesh)
    a = render(s, state, grid_camera(), BG).image
    perm = np.random.default_rng(0).permutation(len(s))
    b = render(s.take(perm), state, grid_camera(), BG).image
    assert np.array_equal(a, b)


def test_non_finite_splat_is_skipped_and_counted():
    mesh, s = _scene(20)
    state = deform(mesh)
    clean = render(s, state, grid_camera(), BG)
    bad = s.copy()
    bad.color[3] = np.nan
    bad.opacity_logit[3] = 30.0
    out = render(bad, state, grid_camera(), BG)
    assert out.diagnostics["non_finite"] == 1
    assert np.all(np.isfinite(out.image))
    ref = render(s.take([i for i in range(20) if i != 3]), state, grid_camera(), BG)
    assert np.array_equal(out.image, ref.image)
    assert clean.diagnostics["non_finite"] == 0


def test_backward_needs_render_bookkeeping():
    bare = RenderOutput(np.zeros((2, 2, 3)), np.zeros((2, 2)), np.ones((2, 2)), np.zeros((2, 2), int), {})
    with pytest.raises(RuntimeError):
        backward(bare, np.zeros((2, 2, 3)))


def test_zero_upstream_gradient():
    mesh, s = _scene(10)
    out = render(s, deform(mesh), grid_camera(), BG)
    acc = ImportanceAccumulator.zeros(len(s))
    g = backward(out, np.zeros_like(out.image), acc)
    for v in g.as_dict().values():
        assert np.all(v == 0)
    assert np.all(acc.grad_norm_sum == 0)
    assert np.array_equal(acc.observation_count, g.observed.astype(int))
    assert g.observed.any()


def test_importance_only_grows_between_resets():
    mesh, s = _scene(30)
    rng = np.random.default_rng(0)
    acc = ImportanceAccumulator.zeros(len(s))
    state = deform(mesh)
    prev = acc.grad_norm_sum.copy()
    for _ in range(3):
        out = render(s, state, grid_camera(), BG)
        backward(out, rng.normal(size=out.image.shape), acc)
        assert np.all(acc.grad_norm_sum >= prev)
        prev = acc.grad_norm_sum.copy()
    assert np.all(acc.importance("mean") >= 0)
    assert np.allclose(acc.importance("sum"), acc.grad_norm_sum)
    acc.reset()
    assert np.all(acc.grad_norm_sum == 0) and np.all(acc.observation_count == 0)


def _fd_setup(seed):
    mesh, s = _scene(10, seed=seed)
    rng = np.random.default_rng(seed)
    de = rng.normal(size=mesh.expr_basis.shape) * 0.01
    coeffs = ([0.3, -0.2], [0.8])
    weights = rng.normal(size=(32, 32, 3))
    cam = grid_camera()

    def loss(splats=s, delta_expr=de):
        state = deform(mesh, *coeffs, delta_expr=delta_expr)
        # alpha_min near zero keeps the loss smooth for finite differences
        return float(np.sum(weights * render(splats, state, cam, BG, alpha_min=1e-12).image))

    out = render(s, deform(mesh, *coeffs, delta_expr=de), cam, BG, alpha_min=1e-12)
    return s, de, loss, backward(out, weights)


def _rel_err(fd, an, scale):
    return abs(fd - an) / max(abs(fd), abs(an), 1e-6 * scale)


@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(seed):
    s, de, loss, g = _fd_setup(seed)
    h = 1e-4
    tol = {"color": 1e-4, "opacity_logit": 1e-4, "offset": 1e-3, "log_scale": 1e-3, "quat": 1e-3}
    for name, limit in tol.items():
        values = getattr(s, name)
        grad = getattr(g, name)
        scale = np.abs(grad).max()
        for idx in np.ndindex(values.shape):
            fd = central_difference(loss, values, idx, h)
            assert _rel_err(fd, grad[idx], scale) <= limit, (name, idx, fd, grad[idx])
    # the mesh correction enters through the splat positions
    scale = np.abs(g.delta_expr).max()
    for idx in [(0, 5, 0), (0, 6, 2), (0, 9, 1), (0, 10, 2)]:
        fd = central_difference(lambda: loss(delta_expr=de), de, idx, h)
        assert _rel_err(fd, g.delta_expr[idx], scale) <= 1e-3


def test_render_is_deterministic():
    mesh, s = _scene(50)
    state = deform(mesh)
    a = render(s, state, grid_camera(), BG)
    b = render(s, state, grid_camera(), BG)
    assert np.array_equal(a.image, b.image)
    w = np.random.default_rng(0).normal(size=a.image.shape)
    ga, gb = backward(a, w), backward(b, w)
    for k, v in ga.as_dict().items():
        assert np.array_equal(v, gb.as_dict()[k]), k
