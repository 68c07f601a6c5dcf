"""Stage-I optimisation of UV-anchored splats and blendshape corrections."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .densify import densify_sample, densify_threshold_baseline, prune, reset_opacity
from .losses import LossReport, PerceptualLoss, dssim_loss, l1_loss, scale_loss
from .mesh import (
    TemplateMesh,
    anchor_loss,
    anchor_loss_backward,
    deform,
    deform_backward,
    laplacian_loss,
    laplacian_loss_backward,
    sample_uv_uniform,
)
from .metrics import MetricsReport, psnr
from .optim import Adam
from .raster import ImportanceAccumulator, backward, render
from .splats import PARAM_FIELDS, SplatSet, encode_checkpoint, save_checkpoint
from .synth import Frame, SyntheticScene

log = logging.getLogger(__name__)

METRICS_HEADER = ["iter", "l1", "dssim", "scale", "lap", "anchor", "total", "psnr", "num_splats"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Hyper-parameters. Defaults are the full-scale schedule; desk-scale runs
    shrink ``num_splats``, the intervals and ``iterations``."""

    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_offset: float = 1.6e-3
    lr_blendshape: float = 1e-5
    lambda_perceptual: float = 0.1
    lambda_laplacian: float = 100.0
    lambda_anchor: float = 100.0
    lambda_scale: float = 0.1
    r_ratio: float = 4.0
    num_splats: int = 65_000
    init_opacity: float = 0.1
    init_color: float = 0.5
    init_scale_factor: float = 1.0
    densify: str = "sample"  # "sample", "threshold" or "none"
    densify_interval: int = 3000
    densify_count: int = 1000
    importance_mode: str = "mean"
    tau_pos: float = 2e-4
    prune_interval: int = 2000
    prune_opacity_threshold: float = 5e-3
    opacity_reset_interval: int = 6000
    iterations: int | None = None
    total_epochs: int = 10
    rng_seed: int = 0
    log_interval: int = 10
    checkpoint_interval: int = 0
    learn_blendshapes: bool = True

    def __post_init__(self):
        for name in ("densify_interval", "prune_interval", "opacity_reset_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if min(self.lambdas) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.prune_opacity_threshold < 1:
            raise ValueError("prune_opacity_threshold must lie in (0, 1)")
        if self.densify not in ("sample", "threshold", "none"):
            raise ValueError(f"unknown densify mode {self.densify!r}")

    @property
    def lambdas(self) -> tuple[float, float, float, float]:
        return (self.lambda_perceptual, self.lambda_laplacian, self.lambda_anchor, self.lambda_scale)

    def learning_rates(self) -> dict[str, float]:
        blend = self.lr_blendshape if self.learn_blendshapes else 0.0
        return {
            "color": self.lr_color, "opacity_logit": self.lr_opacity, "log_scale": self.lr_scale,
            "quat": self.lr_rotation, "offset": self.lr_offset,
            "delta_pose": blend, "delta_expr": blend,
        }

    def total_iterations(self, num_train_frames: int) -> int:
        if self.iterations is not None:
            return int(self.iterations)
        return int(self.total_epochs * num_train_frames)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def initial_splats(mesh: TemplateMesh, cfg: TrainConfig) -> SplatSet:
    """Uniform UV sampling; isotropic scale matched to the mean spacing on the surface."""
    face, bary = sample_uv_uniform(mesh, cfg.num_splats, cfg.rng_seed)
    area = float(mesh.rest_frames.area.sum())
    log_scale = math.log(cfg.init_scale_factor * math.sqrt(area / cfg.num_splats))
    return SplatSet.create(face, bary, log_scale=log_scale, opacity=cfg.init_opacity, color=cfg.init_color)


def frame_state(mesh: TemplateMesh, frame: Frame, delta_pose=None, delta_expr=None):
    return deform(mesh, frame.pose, frame.expr, delta_pose, delta_expr, frame.joint_rotations)


def render_frame(splats: SplatSet, mesh: TemplateMesh, frame: Frame, background,
                 delta_pose=None, delta_expr=None):
    return render(splats, frame_state(mesh, frame, delta_pose, delta_expr), frame.camera, background)


def evaluate(splats: SplatSet, delta_pose, delta_expr, scene: SyntheticScene, split: str = "test") -> MetricsReport:
    report = MetricsReport()
    for frame in scene.split(split):
        out = render_frame(splats, scene.mesh, frame, scene.background, delta_pose, delta_expr)
        report.add(frame.index, out.image, frame.image)
    return report


def mesh_regularizers(state, reference, cfg: TrainConfig):
    """Laplacian and anchor terms plus dL/d(posed vertices) of their weighted sum."""
    lap = laplacian_loss(state)
    anc = anchor_loss(state, reference)
    grad = (cfg.lambda_laplacian * laplacian_loss_backward(state)
            + cfg.lambda_anchor * anchor_loss_backward(state, reference))
    return lap, anc, grad


@dataclass
class StepResult:
    report: LossReport
    psnr: float


class Trainer:
    """Holds the optimisation state; ``step()`` runs one iteration."""

    def __init__(self, scene: SyntheticScene, cfg: TrainConfig,
                 perceptual: PerceptualLoss = dssim_loss, splats: SplatSet | None = None):
        self.scene = scene
        self.cfg = cfg
        self.perceptual = perceptual
        self.mesh = scene.mesh
        self.splats = initial_splats(self.mesh, cfg) if splats is None else splats.copy()
        self.delta_pose = np.zeros_like(self.mesh.pose_basis)
        self.delta_expr = np.zeros_like(self.mesh.expr_basis)
        self.adam = Adam(cfg.learning_rates())
        self.importance = ImportanceAccumulator.zeros(len(self.splats))
        self.rng = np.random.default_rng(cfg.rng_seed + 1)
        self.iteration = 0
        self.train_frames = scene.split("train")
        if not self.train_frames:
            raise ValueError("scene has no training frames")
        self._order: list[int] = []
        self.history: list[dict] = []

    def _next_frame(self) -> Frame:
        if not self._order:
            self._order = list(self.rng.permutation(len(self.train_frames)))
        return self.train_frames[self._order.pop(0)]

    def step(self) -> StepResult:
        cfg = self.cfg
        frame = self._next_frame()
        state = frame_state(self.mesh, frame, self.delta_pose, self.delta_expr)
        out = render(self.splats, state, frame.camera, self.scene.background)
        l1, g_l1 = l1_loss(out.image, frame.image)
        perc, g_perc = self.perceptual(out.image, frame.image)
        grads = backward(out, g_l1 + cfg.lambda_perceptual * g_perc, self.importance)
        sc, g_sc = scale_loss(self.splats.log_scale, cfg.r_ratio)
        reference = frame_state(self.mesh, frame)
        lap, anc, g_mesh = mesh_regularizers(state, reference, cfg)
        report = LossReport.combine(l1, perc, sc, lap, anc, cfg.lambdas)
        if not np.isfinite(report.total):
            raise TrainingDiverged(f"non-finite loss at iteration {self.iteration + 1}: {report}")

        g = grads.as_dict()
        g["log_scale"] = g["log_scale"] + cfg.lambda_scale * g_sc
        d_pose, d_expr = deform_backward(state, g_mesh)
        g["delta_pose"] = g["delta_pose"] + d_pose
        g["delta_expr"] = g["delta_expr"] + d_expr

        params = {name: getattr(self.splats, name) for name in PARAM_FIELDS}
        params["delta_pose"] = self.delta_pose
        params["delta_expr"] = self.delta_expr
        new = self.adam.step(params, g)
        for name in PARAM_FIELDS:
            setattr(self.splats, name, new[name])
        self.splats.renormalize()
        self.delta_pose = new["delta_pose"]
        self.delta_expr = new["delta_expr"]
        self.iteration += 1
        self._schedule()
        return StepResult(report, psnr(out.image, frame.image))

    def _schedule(self) -> None:
        cfg, it = self.cfg, self.iteration
        if cfg.densify != "none" and it % cfg.densify_interval == 0:
            before = len(self.splats)
            if cfg.densify == "sample":
                self.splats, _ = densify_sample(self.splats, self.importance, cfg.densify_count,
                                                self.rng, cfg.importance_mode)
            else:
                self.splats = densify_threshold_baseline(self.splats, self.importance, cfg.tau_pos,
                                                         self.mesh, self.rng)
            added = len(self.splats) - before
            if cfg.densify == "sample" or added:
                # baseline removes split parents, so reset moments entirely there
                for name in PARAM_FIELDS:
                    if cfg.densify == "sample":
                        self.adam.extend(name, added)
                    else:
                        self.adam.m.pop(name, None)
                        self.adam.v.pop(name, None)
            log.debug("iter %d: densified %d -> %d", it, before, len(self.splats))
        if it % cfg.prune_interval == 0:
            kept, removed = prune(self.splats, cfg.prune_opacity_threshold)
            if len(removed):
                keep = np.ones(len(self.splats), dtype=bool)
                keep[removed] = False
                for name in PARAM_FIELDS:
                    self.adam.take(name, keep)
                self.importance.take(keep)
                self.splats = kept
        if it % cfg.opacity_reset_interval == 0:
            reset_opacity(self.splats)
            self.adam.reset("opacity_logit")

    def checkpoint_bytes(self) -> bytes:
        return encode_checkpoint(self.splats, self.delta_pose, self.delta_expr)

    def run(self, iterations: int | None = None, out_dir: str | os.PathLike | None = None) -> "TrainResult":
        cfg = self.cfg
        total = cfg.total_iterations(len(self.train_frames)) if iterations is None else iterations
        out = Path(out_dir) if out_dir is not None else None
        rows = []
        try:
            for _ in range(total):
                res = self.step()
                if self.iteration % cfg.log_interval == 0 or self.iteration == total:
                    r = res.report
                    rows.append([self.iteration, r.l1, r.perceptual_proxy, r.scale, r.laplacian,
                                 r.anchor, r.total, res.psnr, len(self.splats)])
                if out is not None and cfg.checkpoint_interval and self.iteration % cfg.checkpoint_interval == 0:
                    self.save(out)
        except TrainingDiverged:
            if out is not None:
                out.mkdir(parents=True, exist_ok=True)
                (out / "diverged.json").write_text(json.dumps({
                    "iteration": self.iteration + 1,
                    "num_splats": len(self.splats),
                    "non_finite": {n: int((~np.isfinite(getattr(self.splats, n))).sum()) for n in PARAM_FIELDS},
                }, indent=2))
            raise
        result = TrainResult(self.splats, self.delta_pose, self.delta_expr, rows)
        if out is not None:
            self.save(out)
            write_metrics_csv(out / "metrics.csv", rows)
            (out / "train_config.json").write_text(json.dumps(asdict(cfg), indent=2))
        return result

    def save(self, out: Path) -> Path:
        path = Path(out) / "checkpoint.uvgs"
        save_checkpoint(path, self.splats, self.delta_pose, self.delta_expr)
        return path


@dataclass
class TrainResult:
    splats: SplatSet
    delta_pose: np.ndarray
    delta_expr: np.ndarray
    metrics: list[list]


def write_metrics_csv(path, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for row in rows:
        writer.writerow([row[0]] + [repr(float(v)) for v in row[1:-1]] + [row[-1]])
    Path(path).write_text(buf.getvalue())


def train(scene: SyntheticScene, cfg: TrainConfig, out_dir=None, iterations: int | None = None) -> TrainResult:
    return Trainer(scene, cfg).run(iterations, out_dir)
