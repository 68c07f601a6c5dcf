import json

import numpy as np
import pytest

from conftest import TINY_SCENE
from uvsplat.baking import load_any, splats_touching, uv_rect_mask
from uvsplat.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from uvsplat.imageio import encode_gamma, read_pnm, write_image
from uvsplat.raster import render
from uvsplat.splats import encode_checkpoint
from uvsplat.synth import load_scene
from uvsplat.train import TrainConfig, frame_state, initial_splats

BAKE_CFG = {"resolution": 16, "base_width": 4, "depth": 2, "iterations": 2}
RECT = (0.3, 0.3, 0.7, 0.7)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scene.json").write_text(json.dumps(TINY_SCENE))
    (root / "train.json").write_text(json.dumps({"num_splats": 300, "log_interval": 1}))
    (root / "bake.json").write_text(json.dumps(BAKE_CFG))
    assert main(["synth", "--config", str(root / "scene.json"), "--seed", "1", "--out", str(root / "scene")]) == 0
    assert main(["train", "--scene", str(root / "scene"), "--config", str(root / "train.json"),
                 "--iterations", "3", "--seed", "2", "--out", str(root / "s1")]) == 0
    assert main(["bake", "--scene", str(root / "scene"), "--checkpoint", str(root / "s1" / "checkpoint.uvgs"),
                 "--config", str(root / "bake.json"), "--out", str(root / "baked")]) == 0
    return root


def test_usage_errors(workspace, capsys):
    assert main(["train", "--bogus"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err
    assert main([]) == EXIT_USAGE
    assert main(["bake", "--scene", str(workspace / "scene"), "--out", str(workspace / "x")]) == EXIT_USAGE
    assert main(["edit", "apply-sticker", "--checkpoint", "c", "--sticker", "s", "--uv-rect", "1,2",
                 "--out", str(workspace / "x")]) == EXIT_USAGE
    assert main(["--help"]) == EXIT_OK


def test_runtime_errors(workspace, capsys):
    assert main(["eval", "--checkpoint", str(workspace / "missing.uvgs"), "--scene", str(workspace / "scene")]) == EXIT_RUNTIME
    assert main(["edit", "export", "--group", "color", "--checkpoint", str(workspace / "s1" / "checkpoint.uvgs"),
                 "--out", str(workspace / "x")]) == EXIT_RUNTIME
    assert "bake" in capsys.readouterr().err


def test_train_zero_iterations_equals_initialisation(workspace):
    out = workspace / "zero"
    assert main(["train", "--scene", str(workspace / "scene"), "--config", str(workspace / "train.json"),
                 "--iterations", "0", "--seed", "4", "--out", str(out)]) == EXIT_OK
    scene = load_scene(workspace / "scene")
    init = initial_splats(scene.mesh, TrainConfig(num_splats=300, rng_seed=4))
    expected = encode_checkpoint(init, np.zeros_like(scene.mesh.pose_basis), np.zeros_like(scene.mesh.expr_basis))
    assert (out / "checkpoint.uvgs").read_bytes() == expected


def test_eval_json(workspace, capsys):
    capsys.readouterr()
    code = main(["eval", "--checkpoint", str(workspace / "s1" / "checkpoint.uvgs"), "--scene",
                 str(workspace / "scene"), "--split", "train", "--json", "--out", str(workspace / "ev")])
    assert code == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["split"] == "train" and np.isfinite(doc["psnr"]) and len(doc["per_frame"]) == 4
    assert json.loads((workspace / "ev" / "eval.json").read_text()) == doc
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(workspace / "baked" / "baked.uvgs"), "--scene",
                 str(workspace / "scene")]) == EXIT_OK
    assert "PSNR" in capsys.readouterr().out


def test_export_import_round_trip(workspace):
    ck = workspace / "baked" / "baked.uvgs"
    assert main(["edit", "export", "--checkpoint", str(ck), "--group", "opacity", "--out", str(workspace / "ex")]) == 0
    assert read_pnm(workspace / "ex" / "opacity.pgm")[1] == 65535
    assert main(["edit", "import", "--checkpoint", str(ck), "--group", "opacity",
                 "--image", str(workspace / "ex" / "opacity.pgm"), "--out", str(workspace / "im")]) == 0
    assert np.array_equal(load_any(workspace / "im" / "edited.uvgs")[3].maps, load_any(ck)[3].maps)


def test_sticker_then_render_shows_sticker(workspace):
    red = np.zeros((8, 8, 3))
    red[..., 0] = 1.0
    write_image(workspace / "sticker.ppm", red)
    rect = ",".join(map(str, RECT))
    assert main(["edit", "apply-sticker", "--checkpoint", str(workspace / "baked" / "baked.uvgs"),
                 "--sticker", str(workspace / "sticker.ppm"), "--uv-rect", rect, "--out", str(workspace / "ed")]) == 0
    edited = workspace / "ed" / "edited.uvgs"
    assert main(["render", "--checkpoint", str(edited), "--scene", str(workspace / "scene"),
                 "--split", "test", "--out", str(workspace / "rd")]) == 0
    scene = load_scene(workspace / "scene")
    anchors, dp, de, maps = load_any(edited)
    splats = maps.splats(anchors, scene.mesh)
    mask = uv_rect_mask(RECT, maps.resolution)
    inside = splats_touching(maps, anchors, scene.mesh, mask)
    outside = splats_touching(maps, anchors, scene.mesh, ~mask)
    only_sticker = inside & ~outside
    checked = 0
    for f in scene.split("test"):
        out = render(splats, frame_state(scene.mesh, f, dp, de), f.camera, scene.background)
        codes, _ = read_pnm(workspace / "rd" / "frames" / f"{f.index:04d}.ppm")
        assert np.array_equal(codes, encode_gamma(out.image))
        for r in range(out.image.shape[0]):
            for c in range(out.image.shape[1]):
                contrib = out.contributors(r, c)
                if contrib and all(only_sticker[i] for i, _ in contrib):
                    t = out.final_t[r, c]
                    expected = (1 - t) * red[0, 0] + t * scene.background
                    assert np.allclose(out.image[r, c], expected, atol=1e-6)
                    checked += 1
    assert checked > 0


def test_render_orbit(workspace):
    assert main(["render", "--checkpoint", str(workspace / "s1" / "checkpoint.uvgs"), "--scene",
                 str(workspace / "scene"), "--orbit", "3", "--out", str(workspace / "orbit")]) == 0
    frames = sorted((workspace / "orbit" / "frames").glob("*.ppm"))
    assert [p.name for p in frames] == ["0000.ppm", "0001.ppm", "0002.ppm"]
    assert main(["render", "--checkpoint", str(workspace / "s1" / "checkpoint.uvgs"), "--scene",
                 str(workspace / "scene"), "--orbit", "0", "--out", str(workspace / "orbit")]) == EXIT_USAGE


def test_bake_variants(workspace):
    base = ["bake", "--scene", str(workspace / "scene"), "--config", str(workspace / "bake.json")]
    assert main(base + ["--checkpoint", str(workspace / "s1" / "checkpoint.uvgs"), "--direct",
                        "--out", str(workspace / "direct")]) == 0
    assert load_any(workspace / "direct" / "baked.uvgs")[3].net_config is None
    cfg = dict(BAKE_CFG, train={"num_splats": 150})
    (workspace / "one.json").write_text(json.dumps(cfg))
    assert main(["bake", "--scene", str(workspace / "scene"), "--config", str(workspace / "one.json"),
                 "--one-stage", "--out", str(workspace / "one")]) == 0
    assert len(load_any(workspace / "one" / "baked.uvgs")[0]) == 150
    assert json.loads((workspace / "one" / "bake_history.json").read_text())[-1]["iter"] == 2
