"""Stage-II baking of per-splat attributes into continuous UV attribute maps.

Noise features pass through a convolutional prefilter to give an 11-channel
map; splats read their attributes back by bilinear lookup at their anchor UV.

Channel layout (``LAYOUT_VERSION`` 1)::

    0..2  scale pre-activation v      3..5  rotation axis-angle
    6..8  linear RGB                  9     opacity logit
    10    normal offset

The scale channel decodes as ``ls = s_max - softplus(s_max - (v + s_mean))``,
which is always below ``s_max``; the splat's log-scale is ``ls``.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bakenet import NetConfig, PrefilterNet
from .imageio import decode_gamma, encode_gamma, read_pnm, write_pnm
from .losses import DEFAULT_LAMBDAS, LossReport, dssim_loss, l1_loss, scale_loss
from .mesh import TemplateMesh, deform_backward
from .optim import Adam
from .raster import backward, render
from .rotations import axis_angle_to_quat, axis_angle_to_quat_backward, quat_to_axis_angle
from .splats import BAKE_MAGIC, SplatSet, decode_checkpoint, encode_checkpoint, atomic_write, logit, sigmoid
from .synth import SyntheticScene
from .train import TrainConfig, frame_state, initial_splats, mesh_regularizers

log = logging.getLogger(__name__)

LAYOUT_VERSION = 1
BAKE_VERSION = 1
NUM_CHANNELS = 11
CHANNEL_GROUPS = {
    "scale": slice(0, 3),
    "rotation": slice(3, 6),
    "color": slice(6, 9),
    "opacity": slice(9, 10),
    "offset": slice(10, 11),
}
APPEARANCE_CHANNELS = slice(6, 10)
# affine ranges for 16-bit export of the decoded groups
GROUP_RANGES = {
    "scale": (-12.0, 4.0),  # log-scale
    "rotation": (-math.pi, math.pi),
    "opacity": (0.0, 1.0),
    "offset": (-0.05, 0.05),
}
OPACITY_EPS = 1e-6
ONE_STAGE_SCALE_HEADROOM = math.log(4.0)


def softplus(x):
    return np.logaddexp(0.0, x)


def decode_log_scale(v, s_mean: float, s_max: float):
    return s_max - softplus(s_max - (np.asarray(v, dtype=np.float64) + s_mean))


def decode_log_scale_grad(v, s_mean: float, s_max: float):
    return sigmoid(s_max - (np.asarray(v, dtype=np.float64) + s_mean))


def encode_log_scale(ls, s_mean: float, s_max: float):
    """Inverse of :func:`decode_log_scale`; inputs at or above ``s_max`` are clamped just below."""
    y = np.maximum(s_max - np.asarray(ls, dtype=np.float64), 1e-6)
    return s_max - s_mean - (y + np.log(-np.expm1(-y)))


# --------------------------------------------------------------- decoding


@dataclass
class DecodedAttributes:
    log_scale: np.ndarray
    quat: np.ndarray
    color: np.ndarray
    opacity_logit: np.ndarray
    offset: np.ndarray

    def vector(self, raw: np.ndarray) -> np.ndarray:
        """Comparison vector used by the value regulariser: decoded log-scale plus raw channels 3..10."""
        return np.concatenate([self.log_scale, raw[:, 3:]], axis=1)


def decode_attributes(raw: np.ndarray, s_mean: float, s_max: float) -> DecodedAttributes:
    raw = np.asarray(raw, dtype=np.float64)
    return DecodedAttributes(
        log_scale=decode_log_scale(raw[:, 0:3], s_mean, s_max),
        quat=axis_angle_to_quat(raw[:, 3:6]),
        color=raw[:, 6:9].copy(),
        opacity_logit=raw[:, 9].copy(),
        offset=raw[:, 10].copy(),
    )


def decode_attributes_backward(raw: np.ndarray, grads: dict, s_mean: float, s_max: float) -> np.ndarray:
    d = np.zeros_like(raw, dtype=np.float64)
    d[:, 0:3] = grads["log_scale"] * decode_log_scale_grad(raw[:, 0:3], s_mean, s_max)
    d[:, 3:6] = axis_angle_to_quat_backward(raw[:, 3:6], grads["quat"])
    d[:, 6:9] = grads["color"]
    d[:, 9] = grads["opacity_logit"]
    d[:, 10] = grads["offset"]
    return d


def encode_attributes(splats: SplatSet, s_mean: float, s_max: float) -> np.ndarray:
    """Raw 11-channel values that decode (up to clamping) to ``splats``' attributes."""
    raw = np.empty((len(splats), NUM_CHANNELS))
    raw[:, 0:3] = encode_log_scale(splats.log_scale, s_mean, s_max)
    raw[:, 3:6] = quat_to_axis_angle(splats.quat)
    raw[:, 6:9] = splats.color
    raw[:, 9] = splats.opacity_logit
    raw[:, 10] = splats.offset
    return raw


# ------------------------------------------------------------ bilinear lookup


@dataclass
class BilinearSample:
    index: np.ndarray  # (N, 4) flat texel index
    weight: np.ndarray  # (N, 4)
    resolution: int
    out_of_range: int


def anchor_uv(mesh: TemplateMesh, face: np.ndarray, bary: np.ndarray) -> np.ndarray:
    return np.einsum("nk,nkd->nd", bary, mesh.uv_corners[face])


def bilinear_setup(uv: np.ndarray, resolution: int) -> BilinearSample:
    """Texel ``(row i, col j)`` is centred at ``u = (j + 0.5) / S``, ``v = (i + 0.5) / S``.

    Lookups clamp to the border; UVs outside the unit square are counted.
    """
    s = int(resolution)
    if s < 2:
        raise ValueError("resolution must be at least 2")
    uv = np.asarray(uv, dtype=np.float64)
    out_of_range = int(np.count_nonzero(np.any((uv < 0) | (uv > 1), axis=1)))
    x = np.clip(uv[:, 0] * s - 0.5, 0, s - 1)
    y = np.clip(uv[:, 1] * s - 0.5, 0, s - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), s - 2)
    y0 = np.minimum(np.floor(y).astype(np.int64), s - 2)
    fx, fy = x - x0, y - y0
    base = y0 * s + x0
    index = np.stack([base, base + 1, base + s, base + s + 1], axis=1)
    weight = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=1)
    return BilinearSample(index, weight, s, out_of_range)


def sample_maps(maps: np.ndarray, samp: BilinearSample) -> np.ndarray:
    """``(C, S, S)`` maps -> ``(N, C)`` samples."""
    flat = np.asarray(maps, dtype=np.float64).reshape(maps.shape[0], -1)
    return np.einsum("cnk,nk->nc", flat[:, samp.index], samp.weight)


def sample_maps_backward(d_samples: np.ndarray, samp: BilinearSample) -> np.ndarray:
    s = samp.resolution
    idx = samp.index.ravel()
    out = np.empty((d_samples.shape[1], s * s))
    for c in range(d_samples.shape[1]):
        out[c] = np.bincount(idx, weights=(d_samples[:, c, None] * samp.weight).ravel(), minlength=s * s)
    return out.reshape(-1, s, s)


def sample_attributes(maps: np.ndarray, face, bary, mesh: TemplateMesh, s_mean: float, s_max: float):
    """Bilinear lookup at anchor UVs followed by decoding.

    Returns ``(decoded, raw, diagnostics)`` where diagnostics counts
    clamped out-of-range UVs.
    """
    samp = bilinear_setup(anchor_uv(mesh, face, bary), maps.shape[-1])
    raw = sample_maps(maps, samp)
    return decode_attributes(raw, s_mean, s_max), raw, {"uv_out_of_range": samp.out_of_range}


# ----------------------------------------------------------- map container


def make_noise(seed: int, shape) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


def noise_digest(noise: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(noise, dtype="<f4").tobytes()).hexdigest()


@dataclass
class AttributeMapSet:
    """Baked maps plus everything needed to reproduce them.

    ``net_config`` is ``None`` for directly optimised per-texel maps.
    """

    maps: np.ndarray  # (11, S, S) float32
    s_mean: float
    s_max: float
    noise_seed: int
    noise_hash: str
    net_config: NetConfig | None
    net_state: dict = field(default_factory=dict)
    appearance_only: bool = False
    layout_version: int = LAYOUT_VERSION

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float32)
        if self.maps.ndim != 3 or self.maps.shape[0] != NUM_CHANNELS or self.maps.shape[1] != self.maps.shape[2]:
            raise ValueError(f"attribute maps must be (11, S, S), got {self.maps.shape}")
        if not np.isfinite(self.maps).all():
            raise ValueError("attribute maps contain non-finite values")

    @property
    def resolution(self) -> int:
        return self.maps.shape[-1]

    def copy(self, **changes) -> "AttributeMapSet":
        out = replace(self, maps=self.maps.copy(), net_state={k: v.copy() for k, v in self.net_state.items()})
        for k, v in changes.items():
            setattr(out, k, v)
        out.__post_init__()
        return out

    def sampler(self, anchors: SplatSet, mesh: TemplateMesh) -> BilinearSample:
        return bilinear_setup(anchor_uv(mesh, anchors.face, anchors.bary), self.resolution)

    def splats(self, anchors: SplatSet, mesh: TemplateMesh) -> SplatSet:
        """Splats at the frozen anchors with attributes read from the maps.

        In appearance-only mode scale, rotation and offset stay those of ``anchors``.
        """
        raw = sample_maps(self.maps, self.sampler(anchors, mesh))
        return assemble_splats(anchors, decode_attributes(raw, self.s_mean, self.s_max), self.appearance_only)


def assemble_splats(anchors: SplatSet, dec: DecodedAttributes, appearance_only: bool) -> SplatSet:
    out = anchors.copy()
    out.color = dec.color
    out.opacity_logit = dec.opacity_logit
    if not appearance_only:
        out.log_scale = dec.log_scale
        out.quat = dec.quat
        out.offset = dec.offset
    return out


def total_variation(image: np.ndarray) -> float:
    """Anisotropic TV of a ``(C, H, W)`` image: summed absolute neighbour differences."""
    image = np.asarray(image, dtype=np.float64)
    return float(np.abs(np.diff(image, axis=1)).sum() + np.abs(np.diff(image, axis=2)).sum())


def value_loss(current: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """RMS distance between sampled and reference attribute vectors."""
    diff = current - target
    rms = float(np.sqrt(np.mean(diff * diff)))
    if rms == 0.0:
        return 0.0, np.zeros_like(diff)
    return rms, diff / (diff.size * rms)


def rotation_loss(axis_angle: np.ndarray) -> tuple[float, np.ndarray]:
    """RMS of the x plus RMS of the y axis-angle components; favours spins about the normal."""
    value = 0.0
    grad = np.zeros_like(axis_angle, dtype=np.float64)
    n = len(axis_angle)
    for c in (0, 1):
        rms = float(np.sqrt(np.mean(axis_angle[:, c] ** 2)))
        value += rms
        if rms > 0:
            grad[:, c] = axis_angle[:, c] / (n * rms)
    return value, grad


# --------------------------------------------------------------- training


@dataclass
class BakeConfig:
    resolution: int = 128
    base_width: int = 16
    depth: int = 3
    decode_only: bool = False
    iterations: int = 600
    lr: float = 1e-3
    direct_lr: float = 1e-2
    lambda_value: float = 0.0
    lambda_rotation: float = 0.0
    appearance_only: bool = False
    noise_seed: int = 0
    net_seed: int = 0
    rng_seed: int = 0
    lambda_perceptual: float = DEFAULT_LAMBDAS[0]
    lambda_laplacian: float = DEFAULT_LAMBDAS[1]
    lambda_anchor: float = DEFAULT_LAMBDAS[2]
    lambda_scale: float = DEFAULT_LAMBDAS[3]
    r_ratio: float = 4.0
    float32: bool = True
    log_interval: int = 10

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError("resolution must be at least 2")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")

    @property
    def lambdas(self):
        return (self.lambda_perceptual, self.lambda_laplacian, self.lambda_anchor, self.lambda_scale)

    @property
    def net_config(self) -> NetConfig:
        return NetConfig(self.base_width, self.depth, self.decode_only)

    @classmethod
    def from_dict(cls, d: dict) -> "BakeConfig":
        names = set(cls.__dataclass_fields__)
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown bake config keys: {sorted(unknown)}")
        return cls(**d)


class _NetSource:
    def __init__(self, net: PrefilterNet, noise: np.ndarray):
        self.net, self.noise = net, noise
        self._tape = None

    @property
    def params(self):
        return self.net.params

    def forward(self) -> np.ndarray:
        out, self._tape = self.net.forward(self.noise, keep_tape=True)
        return out

    def backward(self, d_maps):
        return self.net.backward(d_maps, self._tape)

    def set(self, params):
        self.net.params.update({k: np.asarray(v, dtype=self.net.dtype) for k, v in params.items()})


class _DirectSource:
    def __init__(self, maps: np.ndarray):
        self.params = {"maps": np.asarray(maps, dtype=np.float64).copy()}

    def forward(self):
        return self.params["maps"]

    def backward(self, d_maps):
        return {"maps": d_maps}

    def set(self, params):
        self.params.update(params)


@dataclass
class BakeResult:
    maps: AttributeMapSet
    anchors: SplatSet
    delta_pose: np.ndarray
    delta_expr: np.ndarray
    history: list[dict]


def _optimize(scene: SyntheticScene, anchors: SplatSet, delta_pose, delta_expr, source, lr: float,
              cfg: BakeConfig, s_mean: float, s_max: float, *, train_deltas: float = 0.0,
              target_vector: np.ndarray | None = None):
    mesh = scene.mesh
    frames = scene.split("train")
    rng = np.random.default_rng(cfg.rng_seed + 2)
    samp = bilinear_setup(anchor_uv(mesh, anchors.face, anchors.bary), cfg.resolution)
    if samp.out_of_range:
        log.warning("%d anchors have UVs outside the unit square (clamped)", samp.out_of_range)
    lrs = {name: lr for name in source.params}
    if train_deltas:
        lrs.update(delta_pose=train_deltas, delta_expr=train_deltas)
    adam = Adam(lrs)
    delta_pose, delta_expr = np.array(delta_pose, dtype=np.float64), np.array(delta_expr, dtype=np.float64)
    history = []
    order: list[int] = []
    for it in range(cfg.iterations):
        if not order:
            order = list(rng.permutation(len(frames)))
        frame = frames[order.pop(0)]
        maps = source.forward()
        raw = sample_maps(maps, samp)
        dec = decode_attributes(raw, s_mean, s_max)
        splats = assemble_splats(anchors, dec, cfg.appearance_only)
        state = frame_state(mesh, frame, delta_pose, delta_expr)
        out = render(splats, state, frame.camera, scene.background)
        l1, g_l1 = l1_loss(out.image, frame.image)
        perc, g_perc = dssim_loss(out.image, frame.image)
        g = backward(out, g_l1 + cfg.lambda_perceptual * g_perc)
        sc, g_sc = scale_loss(splats.log_scale, cfg.r_ratio)
        reference = frame_state(mesh, frame)
        lap, anc, g_mesh = mesh_regularizers(state, reference, TrainConfig(
            lambda_laplacian=cfg.lambda_laplacian, lambda_anchor=cfg.lambda_anchor))
        report = LossReport.combine(l1, perc, sc, lap, anc, cfg.lambdas)
        if not np.isfinite(report.total):
            raise FloatingPointError(f"non-finite bake loss at step {it + 1}")
        d_attr = {"log_scale": g.log_scale + cfg.lambda_scale * g_sc, "quat": g.quat,
                  "color": g.color, "opacity_logit": g.opacity_logit, "offset": g.offset}
        d_raw = decode_attributes_backward(raw, d_attr, s_mean, s_max)
        extra = {}
        if cfg.lambda_value and target_vector is not None:
            lv, g_v = value_loss(dec.vector(raw), target_vector)
            g_v[:, 0:3] *= decode_log_scale_grad(raw[:, 0:3], s_mean, s_max)
            d_raw += cfg.lambda_value * g_v
            extra["value"] = lv
        if cfg.lambda_rotation:
            lr_val, g_r = rotation_loss(raw[:, 3:6])
            d_raw[:, 3:6] += cfg.lambda_rotation * g_r
            extra["rotation"] = lr_val
        if cfg.appearance_only:
            keep = np.zeros(NUM_CHANNELS, dtype=bool)
            keep[APPEARANCE_CHANNELS] = True
            d_raw[:, ~keep] = 0.0
        grads = source.backward(sample_maps_backward(d_raw, samp))
        params = dict(source.params)
        if train_deltas:
            dp, de = deform_backward(state, g_mesh)
            grads["delta_pose"], grads["delta_expr"] = g.delta_pose + dp, g.delta_expr + de
            params["delta_pose"], params["delta_expr"] = delta_pose, delta_expr
        new = adam.step(params, grads)
        if train_deltas:
            delta_pose, delta_expr = new.pop("delta_pose"), new.pop("delta_expr")
        source.set(new)
        if (it + 1) % cfg.log_interval == 0 or it + 1 == cfg.iterations:
            history.append({"iter": it + 1, "total": report.total, "l1": report.l1,
                            "dssim": report.perceptual_proxy, **extra})
    return source.forward(), delta_pose, delta_expr, history


def _make_net(cfg: BakeConfig, bias: np.ndarray | None):
    net = PrefilterNet(cfg.net_config, seed=cfg.net_seed, dtype=np.float32 if cfg.float32 else np.float64)
    noise = make_noise(cfg.noise_seed, net.input_shape(cfg.resolution))
    if bias is not None and "head.b" in net.params:
        net.params["head.b"] = np.asarray(bias, dtype=net.dtype)
    return net, noise


def _finish(cfg, maps, net, noise, s_mean, s_max) -> AttributeMapSet:
    return AttributeMapSet(
        maps=maps, s_mean=float(s_mean), s_max=float(s_max), noise_seed=cfg.noise_seed,
        noise_hash=noise_digest(noise), net_config=None if net is None else cfg.net_config,
        net_state={} if net is None else net.state(), appearance_only=cfg.appearance_only)


def scale_statistics(log_scale: np.ndarray) -> tuple[float, float]:
    return float(np.mean(log_scale)), float(np.max(log_scale))


def bake_train(stage1, scene: SyntheticScene, cfg: BakeConfig) -> BakeResult:
    """Two-stage baking: fit the prefilter so that splats at the frozen stage-I
    anchors, reading attributes from the map, re-render the training frames.

    ``stage1`` is a checkpoint path or a ``(splats, delta_pose, delta_expr)`` tuple.
    """
    anchors, delta_pose, delta_expr = _load_stage1(stage1)
    s_mean, s_max = scale_statistics(anchors.log_scale)
    target_raw = encode_attributes(anchors, s_mean, s_max)
    target_vector = np.concatenate([anchors.log_scale, target_raw[:, 3:]], axis=1)
    net, noise = _make_net(cfg, target_raw.mean(axis=0))
    maps, dp, de, hist = _optimize(scene, anchors, delta_pose, delta_expr, _NetSource(net, noise), cfg.lr,
                                   cfg, s_mean, s_max, target_vector=target_vector)
    return BakeResult(_finish(cfg, maps, net, noise, s_mean, s_max), anchors, dp, de, hist)


def one_stage_bake_train(scene: SyntheticScene, cfg: BakeConfig, train_cfg: TrainConfig) -> BakeResult:
    """Ablation: prefilter trained jointly with the blendshape corrections from a
    uniform initial anchor set, without densification."""
    anchors = initial_splats(scene.mesh, train_cfg)
    s_mean, _ = scale_statistics(anchors.log_scale)
    s_max = s_mean + ONE_STAGE_SCALE_HEADROOM
    net, noise = _make_net(cfg, encode_attributes(anchors, s_mean, s_max).mean(axis=0))
    zeros_p = np.zeros_like(scene.mesh.pose_basis)
    zeros_e = np.zeros_like(scene.mesh.expr_basis)
    maps, dp, de, hist = _optimize(scene, anchors, zeros_p, zeros_e, _NetSource(net, noise), cfg.lr, cfg,
                                   s_mean, s_max, train_deltas=train_cfg.lr_blendshape)
    return BakeResult(_finish(cfg, maps, net, noise, s_mean, s_max), anchors, dp, de, hist)


def direct_map_train(stage1, scene: SyntheticScene, cfg: BakeConfig) -> BakeResult:
    """Baseline: optimise the 11 x S x S texels directly, starting from the noise features."""
    anchors, delta_pose, delta_expr = _load_stage1(stage1)
    s_mean, s_max = scale_statistics(anchors.log_scale)
    noise = make_noise(cfg.noise_seed, (NUM_CHANNELS, cfg.resolution, cfg.resolution))
    source = _DirectSource(noise)
    maps, dp, de, hist = _optimize(scene, anchors, delta_pose, delta_expr, source, cfg.direct_lr, cfg,
                                   s_mean, s_max)
    return BakeResult(_finish(cfg, maps, None, noise, s_mean, s_max), anchors, dp, de, hist)


def bake_forward(maps: AttributeMapSet) -> np.ndarray:
    """Re-run the stored prefilter on the stored noise (float64 result)."""
    if maps.net_config is None:
        raise ValueError("map set has no prefilter network")
    dtype = maps.net_state[next(iter(maps.net_state))].dtype
    net = PrefilterNet(maps.net_config, dtype=dtype)
    net.load_state(maps.net_state)
    noise = make_noise(maps.noise_seed, net.input_shape(maps.resolution))
    if noise_digest(noise) != maps.noise_hash:
        raise ValueError("noise features do not match the stored digest")
    return np.asarray(net.forward(noise), dtype=np.float64)


def _load_stage1(stage1):
    if isinstance(stage1, (str, Path)):
        path = Path(stage1)
        if not path.is_file():
            raise FileNotFoundError(f"stage-I checkpoint not found: {path}")
        splats, dp, de, _ = decode_checkpoint(path.read_bytes())
        return splats, dp, de
    splats, dp, de = stage1
    return splats.copy(), np.asarray(dp, dtype=np.float64), np.asarray(de, dtype=np.float64)


# ------------------------------------------------------------ serialisation


def encode_bake_section(maps: AttributeMapSet) -> bytes:
    """``BAKE`` section: magic, u32 version, u64 header length, JSON header,
    then little-endian f32 network parameters in header order, then the maps."""
    names = sorted(maps.net_state)
    header = {
        "layout_version": maps.layout_version,
        "resolution": maps.resolution,
        "s_mean": maps.s_mean,
        "s_max": maps.s_max,
        "noise_seed": maps.noise_seed,
        "noise_hash": maps.noise_hash,
        "appearance_only": maps.appearance_only,
        "net": None if maps.net_config is None else {
            "base_width": maps.net_config.base_width, "depth": maps.net_config.depth,
            "decode_only": maps.net_config.decode_only},
        "params": [[n, list(maps.net_state[n].shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(BAKE_MAGIC)
    buf.write(struct.pack("<IQ", BAKE_VERSION, len(blob)))
    buf.write(blob)
    for n in names:
        buf.write(np.ascontiguousarray(maps.net_state[n], dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(maps.maps, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_bake_section(data: bytes) -> AttributeMapSet | None:
    if not data:
        return None
    buf = io.BytesIO(data)
    if buf.read(4) != BAKE_MAGIC:
        raise ValueError("unknown checkpoint extension")
    version, length = struct.unpack("<IQ", buf.read(12))
    if version != BAKE_VERSION:
        raise ValueError(f"unsupported BAKE version {version}")
    header = json.loads(buf.read(length))
    state = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        state[name] = np.frombuffer(buf.read(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    s = header["resolution"]
    maps = np.frombuffer(buf.read(4 * NUM_CHANNELS * s * s), dtype="<f4").reshape(NUM_CHANNELS, s, s).copy()
    net = header["net"]
    return AttributeMapSet(
        maps=maps, s_mean=header["s_mean"], s_max=header["s_max"], noise_seed=header["noise_seed"],
        noise_hash=header["noise_hash"], net_config=None if net is None else NetConfig(**net),
        net_state=state, appearance_only=header["appearance_only"], layout_version=header["layout_version"])


def save_baked(path, result_or_parts) -> None:
    if isinstance(result_or_parts, BakeResult):
        r = result_or_parts
        parts = (r.anchors, r.delta_pose, r.delta_expr, r.maps)
    else:
        parts = result_or_parts
    anchors, dp, de, maps = parts
    atomic_write(path, encode_checkpoint(anchors, dp, de, encode_bake_section(maps)))


def load_any(path):
    """Return ``(anchors, delta_pose, delta_expr, maps_or_None)`` from a plain or baked checkpoint."""
    anchors, dp, de, extra = decode_checkpoint(Path(path).read_bytes())
    maps = decode_bake_section(extra)
    return anchors, dp, de, maps


def renderable_splats(anchors: SplatSet, maps: AttributeMapSet | None, mesh: TemplateMesh) -> SplatSet:
    return anchors if maps is None else maps.splats(anchors, mesh)


# ------------------------------------------------------------------ editing


def _affine_encode(x, lo, hi):
    t = (np.clip(x, lo, hi) - lo) / (hi - lo)
    return np.round(65535 * t).astype(np.int64)


def _affine_decode(codes, lo, hi):
    return lo + (hi - lo) * np.asarray(codes, dtype=np.float64) / 65535


def _group_values(maps: AttributeMapSet, group: str) -> np.ndarray:
    raw = np.asarray(maps.maps[CHANNEL_GROUPS[group]], dtype=np.float64)
    if group == "scale":
        return decode_log_scale(raw, maps.s_mean, maps.s_max)
    if group == "opacity":
        return sigmoid(raw)
    return raw


def texture_codes(maps: AttributeMapSet, group: str) -> tuple[np.ndarray, int]:
    """Integer image codes for a channel group: 8-bit gamma-encoded RGB for
    color, 16-bit affine codes over ``GROUP_RANGES`` otherwise."""
    if group not in CHANNEL_GROUPS:
        raise ValueError(f"unknown channel group {group!r}")
    vals = np.moveaxis(_group_values(maps, group), 0, -1)
    if group == "color":
        return encode_gamma(vals, 255).astype(np.int64), 255
    codes = _affine_encode(vals, *GROUP_RANGES[group])
    return (codes[..., 0] if codes.shape[-1] == 1 else codes), 65535


def export_texture(maps: AttributeMapSet, group: str, path=None) -> np.ndarray:
    codes, maxval = texture_codes(maps, group)
    if path is not None:
        write_pnm(path, codes, maxval)
    return codes


def import_texture(maps: AttributeMapSet, image, group: str, force: np.ndarray | None = None) -> AttributeMapSet:
    """Return a copy of ``maps`` with texels overwritten from an edited export.

    ``image`` is a path or an integer code array. Only channel values whose code
    differs from the current export are replaced, so importing an unedited
    export is exact. Texels in the boolean ``force`` mask are always replaced.
    """
    current, maxval = texture_codes(maps, group)
    if isinstance(image, (str, Path)):
        codes, file_max = read_pnm(image)
        if file_max != maxval:
            raise ValueError(f"expected maxval {maxval} for group {group!r}, got {file_max}")
    else:
        codes = np.asarray(image, dtype=np.int64)
    if codes.shape != current.shape:
        raise ValueError(f"texture size {codes.shape} does not match {current.shape}")
    if group == "color":
        vals = decode_gamma(codes, 255)
    else:
        vals = _affine_decode(codes, *GROUP_RANGES[group])
    if group == "scale":
        vals = encode_log_scale(vals, maps.s_mean, maps.s_max)
    elif group == "opacity":
        vals = logit(np.clip(vals, OPACITY_EPS, 1 - OPACITY_EPS))
    changed = codes != current
    if force is not None:
        changed |= np.asarray(force, dtype=bool).reshape(force.shape + (1,) * (changed.ndim - 2))
    if vals.ndim == 2:
        vals, changed = vals[..., None], changed[..., None]
    out = maps.copy()
    block = np.moveaxis(out.maps[CHANNEL_GROUPS[group]], 0, -1)  # view
    block[changed] = vals[changed]
    out.__post_init__()
    return out


def uv_rect_mask(uv_rect, resolution: int) -> np.ndarray:
    """Texels whose centres lie in ``[u0, u1] x [v0, v1]``; rows follow v."""
    u0, v0, u1, v1 = uv_rect
    if not (0 <= u0 < u1 <= 1 and 0 <= v0 < v1 <= 1):
        raise ValueError(f"invalid UV rectangle {uv_rect}")
    c = (np.arange(resolution) + 0.5) / resolution
    return ((c[:, None] >= v0) & (c[:, None] <= v1)) & ((c[None, :] >= u0) & (c[None, :] <= u1))


def apply_sticker(maps: AttributeMapSet, sticker: np.ndarray, uv_rect, opaque: bool = True):
    """Paste a linear-RGB ``(h, w, 3)`` sticker over ``uv_rect`` of the color map.

    The sticker is resampled by nearest neighbour. With ``opaque`` the
    opacity texels under the sticker are set to full. Returns the edited maps
    and the boolean texel mask.
    """
    sticker = np.asarray(sticker, dtype=np.float64)
    if sticker.ndim != 3 or sticker.shape[2] != 3:
        raise ValueError("sticker must be an (h, w, 3) RGB image")
    s = maps.resolution
    mask = uv_rect_mask(uv_rect, s)
    u0, v0, u1, v1 = uv_rect
    c = (np.arange(s) + 0.5) / s
    h, w = sticker.shape[:2]
    col = np.clip(((c - u0) / (u1 - u0) * w).astype(np.int64), 0, w - 1)
    row = np.clip(((c - v0) / (v1 - v0) * h).astype(np.int64), 0, h - 1)
    patch = encode_gamma(sticker[row[:, None], col[None, :]], 255).astype(np.int64)
    codes, _ = texture_codes(maps, "color")
    codes[mask] = patch[mask]
    # forced, because an out-of-range texel can share the sticker's clamped code
    out = import_texture(maps, codes, "color", force=mask)
    if opaque:
        op, _ = texture_codes(out, "opacity")
        op[mask] = 65535
        out = import_texture(out, op, "opacity", force=mask)
    return out, mask


def splats_touching(maps: AttributeMapSet, anchors: SplatSet, mesh: TemplateMesh, texel_mask: np.ndarray) -> np.ndarray:
    """Splats whose bilinear footprint includes a masked texel with non-zero weight."""
    samp = maps.sampler(anchors, mesh)
    hit = texel_mask.ravel()[samp.index] & (samp.weight > 0)
    return hit.any(axis=1)
