import csv
import json

import numpy as np
import pytest

from uvsplat.splats import decode_checkpoint, encode_checkpoint
from uvsplat.train import METRICS_HEADER, TrainConfig, Trainer, TrainingDiverged, initial_splats

SMALL = dict(num_splats=400, densify_interval=4, densify_count=25, prune_interval=5,
             opacity_reset_interval=7, log_interval=2, rng_seed=3)


def test_config_defaults_and_validation(tmp_path):
    cfg = TrainConfig()
    assert cfg.lambdas == (0.1, 100.0, 100.0, 0.1)
    assert cfg.learning_rates() == {"color": 2.5e-3, "opacity_logit": 5e-2, "log_scale": 5e-3, "quat": 1e-3,
                                    "offset": 1.6e-3, "delta_pose": 1e-5, "delta_expr": 1e-5}
    assert (cfg.densify_interval, cfg.densify_count, cfg.prune_interval, cfg.opacity_reset_interval) == (3000, 1000, 2000, 6000)
    assert cfg.prune_opacity_threshold == 5e-3 and cfg.tau_pos == 2e-4
    assert TrainConfig(total_epochs=3).total_iterations(16) == 48
    assert TrainConfig(iterations=5).total_iterations(16) == 5
    for bad in ({"prune_interval": 0}, {"lambda_anchor": -1}, {"prune_opacity_threshold": 1.0}, {"densify": "x"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})
    (tmp_path / "c.json").write_text(json.dumps({"num_splats": 7}))
    assert TrainConfig.from_json(tmp_path / "c.json").num_splats == 7


def test_zero_iterations_checkpoint_is_initialisation(tiny_scene, tmp_path):
    cfg = TrainConfig(**SMALL)
    Trainer(tiny_scene, cfg).run(0, tmp_path)
    splats, dp, de, _ = decode_checkpoint((tmp_path / "checkpoint.uvgs").read_bytes())
    init = initial_splats(tiny_scene.mesh, cfg)
    zeros = (np.zeros_like(tiny_scene.mesh.pose_basis), np.zeros_like(tiny_scene.mesh.expr_basis))
    assert (tmp_path / "checkpoint.uvgs").read_bytes() == encode_checkpoint(init, *zeros)
    assert len(splats) == 400 and not dp.any() and not de.any()


def test_schedule_and_outputs(tiny_scene, tmp_path):
    trainer = Trainer(tiny_scene, TrainConfig(**SMALL))
    counts = []
    for _ in range(4):
        res = trainer.step()
        counts.append(len(trainer.splats))
        assert abs(res.report.total - res.report.recompose(trainer.cfg.lambdas)) <= 1e-9
    assert counts == [400, 400, 400, 425]
    assert len(trainer.importance) == 425
    for name in ("color", "quat"):
        assert trainer.adam.m[name].shape[0] == 425
    assert np.allclose(np.linalg.norm(trainer.splats.quat, axis=1), 1, atol=1e-6)
    result = Trainer(tiny_scene, TrainConfig(**SMALL)).run(8, tmp_path)
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == METRICS_HEADER
    assert [int(r[0]) for r in rows[1:]] == [2, 4, 6, 8]
    assert int(rows[-1][-1]) == len(result.splats)
    assert json.loads((tmp_path / "train_config.json").read_text())["num_splats"] == 400


def test_opacity_reset_and_pruning_happen_on_schedule(tiny_scene):
    trainer = Trainer(tiny_scene, TrainConfig(**{**SMALL, "densify": "none", "prune_interval": 1000}))
    for _ in range(7):
        trainer.step()
    assert np.all(trainer.splats.opacity <= 0.01 + 1e-12)
    assert np.all(trainer.adam.m["opacity_logit"] == 0)
    trainer.splats.opacity_logit[:5] = -20.0
    trainer.cfg.prune_interval = 8
    trainer.step()
    assert len(trainer.splats) == 395 and len(trainer.importance) == 395


def test_threshold_baseline_mode_runs(tiny_scene):
    trainer = Trainer(tiny_scene, TrainConfig(**{**SMALL, "densify": "threshold", "tau_pos": 1e-12}))
    for _ in range(4):
        trainer.step()
    assert len(trainer.splats) > 400
    trainer.step()


def test_loss_decreases_over_a_short_run(tiny_scene):
    trainer = Trainer(tiny_scene, TrainConfig(**{**SMALL, "densify": "none", "prune_interval": 1000,
                                                  "opacity_reset_interval": 1000}))
    totals = [trainer.step().report.l1 for _ in range(24)]
    assert np.mean(totals[-4:]) < np.mean(totals[:4])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_writes_diagnostics(tiny_scene, tmp_path):
    trainer = Trainer(tiny_scene, TrainConfig(**SMALL))
    trainer.splats.log_scale[:] = np.inf
    with pytest.raises(TrainingDiverged):
        trainer.run(3, tmp_path)
    doc = json.loads((tmp_path / "diverged.json").read_text())
    assert doc["iteration"] == 1 and doc["non_finite"]["log_scale"] == 1200


def test_same_seed_same_bytes(tiny_scene):
    a = Trainer(tiny_scene, TrainConfig(**SMALL))
    b = Trainer(tiny_scene, TrainConfig(**SMALL))
    a.run(6)
    b.run(6)
    assert a.checkpoint_bytes() == b.checkpoint_bytes()
