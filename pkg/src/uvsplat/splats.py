"""Gaussian splats bound to UV anchors: storage, local-to-world transfer,
3D covariance assembly and EWA projection to the image plane.

Colour is stored as plain RGB. With degree-0 spherical harmonics this is the
DC coefficient times ``SH_C0`` plus the usual 0.5 shift, so nothing is lost by
keeping the activated value directly.
"""
from __future__ import annotations

import hashlib
import io
import os
import struct
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .mesh import (
    DeformState,
    anchor_positions,
    anchor_positions_backward,
    frames_backward,
)
from .rotations import matrix_to_quat, quat_multiply, quat_to_matrix, quat_to_matrix_backward

SH_C0 = 0.28209479177387814
COV2D_FLOOR = 0.3


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class UvAnchor:
    face: int
    bary: tuple[float, float, float]
    offset: float = 0.0

    def __post_init__(self):
        b = np.asarray(self.bary, dtype=np.float64)
        if b.shape != (3,) or np.any(b < 0) or abs(b.sum() - 1) > 1e-9:
            raise ValueError(f"invalid barycentric weights {self.bary}")


@dataclass
class SplatSet:
    """Structure-of-arrays container for N splats.

    ``quat`` is the local rotation (unit, scalar-first), ``log_scale`` the
    local scale in log domain and ``opacity_logit`` the pre-sigmoid opacity.
    """

    face: np.ndarray
    bary: np.ndarray
    offset: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        self.face = np.asarray(self.face, dtype=np.int64).reshape(-1)
        n = len(self.face)
        self.bary = np.asarray(self.bary, dtype=np.float64).reshape(n, 3)
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(n)
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(n, 4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(n, 3)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(n)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(n, 3)

    def __len__(self) -> int:
        return len(self.face)

    @classmethod
    def create(cls, face, bary, *, offset=0.0, log_scale=-3.0, opacity=0.1, color=0.5) -> "SplatSet":
        face = np.asarray(face, dtype=np.int64)
        n = len(face)
        quat = np.zeros((n, 4))
        quat[:, 0] = 1.0
        return cls(
            face,
            bary,
            np.broadcast_to(offset, (n,)).copy(),
            quat,
            np.broadcast_to(log_scale, (n, 3)).copy(),
            np.broadcast_to(logit(opacity), (n,)).copy(),
            np.broadcast_to(color, (n, 3)).copy(),
        )

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def anchor(self, i: int) -> UvAnchor:
        return UvAnchor(int(self.face[i]), tuple(self.bary[i]), float(self.offset[i]))

    def copy(self) -> "SplatSet":
        return SplatSet(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def take(self, index) -> "SplatSet":
        return SplatSet(**{f.name: getattr(self, f.name)[index] for f in fields(self)})

    def concat(self, other: "SplatSet") -> "SplatSet":
        return SplatSet(
            **{f.name: np.concatenate([getattr(self, f.name), getattr(other, f.name)]) for f in fields(self)}
        )

    def renormalize(self) -> None:
        self.quat /= np.linalg.norm(self.quat, axis=1, keepdims=True)


PARAM_FIELDS = ("color", "opacity_logit", "log_scale", "quat", "offset")


@dataclass
class Camera:
    """Pinhole camera; ``world_to_camera`` is a rigid 4x4 (x right, y down, z forward).

    Pixel ``(i, j)`` (row, column) is sampled at image coordinates
    ``(j + 0.5, i + 0.5)``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray
    near: float = 0.01

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        r = self.world_to_camera[:3, :3]
        if self.world_to_camera.shape != (4, 4) or not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError("world_to_camera must be a rigid transform")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "near": self.near,
            "world_to_camera": self.world_to_camera.tolist(),
            "position": self.position.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]), np.asarray(d["world_to_camera"]), float(d.get("near", 0.01)),
        )

    @classmethod
    def look_at(cls, position, target, *, fx, fy, width, height, up=(0.0, 1.0, 0.0), near=0.01) -> "Camera":
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        w2c = np.eye(4)
        w2c[:3, :3] = np.stack([right, down, forward])
        w2c[:3, 3] = -w2c[:3, :3] @ position
        return cls(fx, fy, width / 2.0, height / 2.0, width, height, w2c, near)


# ----------------------------------------------------------------- transfer


@dataclass(frozen=True, eq=False)
class WorldSplats:
    """World-space state of a splat set under one deformation."""

    mean: np.ndarray  # (N, 3)
    rot_local: np.ndarray  # (N, 3, 3)
    rot: np.ndarray  # (N, 3, 3), face rotation @ local rotation
    scale: np.ndarray  # (N, 3), k * exp(log_scale)
    cov: np.ndarray  # (N, 3, 3)

    @property
    def quat(self) -> np.ndarray:
        return matrix_to_quat(self.rot)


def globalize(splats: SplatSet, state: DeformState) -> WorldSplats:
    """Apply the face rotation and scale factor to every splat and build Sigma."""
    mean = anchor_positions(state, splats.face, splats.bary, splats.offset)
    rot_local = quat_to_matrix(splats.quat)
    rot = state.rot[splats.face] @ rot_local
    scale = state.scale[splats.face, None] * np.exp(splats.log_scale)
    m = rot * scale[:, None, :]
    return WorldSplats(mean, rot_local, rot, scale, m @ np.swapaxes(m, 1, 2))


def globalize_one(splat_index: int, splats: SplatSet, state: DeformState):
    """``(mu, r', s')`` for a single splat; ``r'`` is a unit quaternion."""
    ws = globalize(splats.take([splat_index]), state)
    f = splats.face[splat_index]
    r_prime = quat_multiply(matrix_to_quat(state.rot[f]), splats.quat[splat_index])
    return ws.mean[0], r_prime / np.linalg.norm(r_prime), ws.scale[0]


def build_covariance(quat, scale) -> np.ndarray:
    """``R diag(s^2) R^T`` for one or many (quaternion, scale) pairs."""
    r = quat_to_matrix(quat)
    m = r * np.asarray(scale, dtype=np.float64)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def globalize_backward(splats: SplatSet, state: DeformState, ws: WorldSplats, d_mean, d_cov):
    """Adjoint of :func:`globalize`.

    Returns ``(grads, d_vertices)`` where ``grads`` maps splat fields to
    gradients and ``d_vertices`` is dL/d(posed vertices).
    """
    # Sigma = M M^T with M = rot * scale
    m = ws.rot * ws.scale[:, None, :]
    d_m = (d_cov + np.swapaxes(d_cov, 1, 2)) @ m
    d_rot = d_m * ws.scale[:, None, :]
    d_scale = np.sum(d_m * ws.rot, axis=1)
    face_rot = state.rot[splats.face]
    d_face_rot_splat = d_rot @ np.swapaxes(ws.rot_local, 1, 2)
    d_rot_local = np.swapaxes(face_rot, 1, 2) @ d_rot
    local_scale = np.exp(splats.log_scale)
    d_log_scale = d_scale * ws.scale
    d_k_splat = np.sum(d_scale * local_scale, axis=1)
    d_quat = quat_to_matrix_backward(splats.quat, d_rot_local)

    nf = state.mesh.num_faces
    d_face_rot = np.zeros((nf, 3, 3))
    np.add.at(d_face_rot, splats.face, d_face_rot_splat)
    d_face_scale = np.bincount(splats.face, weights=d_k_splat, minlength=nf)
    d_vert_mu, d_normal, d_offset = anchor_positions_backward(
        state, splats.face, splats.bary, splats.offset, d_mean
    )
    d_vertices = d_vert_mu + frames_backward(state, d_face_rot, d_face_scale, d_normal)
    grads = {"quat": d_quat, "log_scale": d_log_scale, "offset": d_offset}
    return grads, d_vertices


# --------------------------------------------------------------- projection


@dataclass(frozen=True, eq=False)
class Projected:
    """Screen-space splats; entries with ``valid == False`` are culled."""

    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2), floor included
    depth: np.ndarray  # (N,)
    valid: np.ndarray  # (N,) bool
    cam_points: np.ndarray  # (N, 3)
    jac: np.ndarray  # (N, 2, 3)
    proj: np.ndarray  # (N, 2, 3) = J W_R


@dataclass(frozen=True)
class ProjectedSplat:
    mean_2d: np.ndarray
    cov_2d: np.ndarray
    depth: float
    alpha_base: float
    color: np.ndarray
    culled: bool


def project_all(mean: np.ndarray, cov: np.ndarray, cam: Camera) -> Projected:
    rot = cam.rotation
    t = mean @ rot.T + cam.translation
    z = t[:, 2]
    valid = z > cam.near
    zs = np.where(valid, z, 1.0)
    inv_z = 1.0 / zs
    mean2d = np.stack([cam.fx * t[:, 0] * inv_z + cam.cx, cam.fy * t[:, 1] * inv_z + cam.cy], axis=1)
    jac = np.zeros((len(mean), 2, 3))
    jac[:, 0, 0] = cam.fx * inv_z
    jac[:, 0, 2] = -cam.fx * t[:, 0] * inv_z * inv_z
    jac[:, 1, 1] = cam.fy * inv_z
    jac[:, 1, 2] = -cam.fy * t[:, 1] * inv_z * inv_z
    proj = jac @ rot
    cov2d = proj @ cov @ np.swapaxes(proj, 1, 2)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR
    return Projected(mean2d, cov2d, z, valid, t, jac, proj)


def project(mean, cov, cam: Camera, opacity: float = 1.0, color=(0.0, 0.0, 0.0)) -> ProjectedSplat:
    """Project a single splat; ``culled`` is set when it lies at or behind the near plane."""
    p = project_all(np.asarray(mean, dtype=np.float64)[None], np.asarray(cov, dtype=np.float64)[None], cam)
    return ProjectedSplat(
        p.mean2d[0], p.cov2d[0], float(p.depth[0]), float(opacity), np.asarray(color, dtype=np.float64),
        not bool(p.valid[0]),
    )


def project_backward(p: Projected, cam: Camera, cov: np.ndarray, d_mean2d, d_cov2d):
    """Returns (dL/d mean world, dL/d Sigma) given screen-space gradients."""
    rot = cam.rotation
    t = p.cam_points
    inv_z = 1.0 / np.where(p.valid, t[:, 2], 1.0)
    # Sigma' = T Sigma T^T
    d_cov = np.swapaxes(p.proj, 1, 2) @ d_cov2d @ p.proj
    d_proj = d_cov2d @ p.proj @ np.swapaxes(cov, 1, 2) + np.swapaxes(d_cov2d, 1, 2) @ p.proj @ cov
    d_jac = d_proj @ rot.T
    d_t = np.zeros_like(t)
    d_t[:, 0] = cam.fx * inv_z * d_mean2d[:, 0]
    d_t[:, 1] = cam.fy * inv_z * d_mean2d[:, 1]
    d_t[:, 2] = -(cam.fx * t[:, 0] * d_mean2d[:, 0] + cam.fy * t[:, 1] * d_mean2d[:, 1]) * inv_z**2
    d_t[:, 0] += -cam.fx * inv_z**2 * d_jac[:, 0, 2]
    d_t[:, 1] += -cam.fy * inv_z**2 * d_jac[:, 1, 2]
    d_t[:, 2] += (
        -cam.fx * inv_z**2 * d_jac[:, 0, 0]
        - cam.fy * inv_z**2 * d_jac[:, 1, 1]
        + 2 * cam.fx * t[:, 0] * inv_z**3 * d_jac[:, 0, 2]
        + 2 * cam.fy * t[:, 1] * inv_z**3 * d_jac[:, 1, 2]
    )
    valid = p.valid[:, None]
    return np.where(valid, d_t @ rot, 0.0), np.where(valid[..., None], d_cov, 0.0)


# --------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"UVGS"
CHECKPOINT_VERSION = 1
BAKE_MAGIC = b"BAKE"


def _write_array(buf, arr) -> None:
    arr = np.asarray(arr)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array(buf) -> np.ndarray:
    (ndim,) = struct.unpack("<I", buf.read(4))
    shape = struct.unpack(f"<{ndim}Q", buf.read(8 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    return np.frombuffer(buf.read(4 * count), dtype="<f4").astype(np.float64).reshape(shape)


def encode_checkpoint(splats: SplatSet, delta_pose, delta_expr, extra: bytes = b"") -> bytes:
    """Serialize to the ``UVGS`` little-endian layout.

    Header: magic, u32 version, u64 count. Then f32 arrays, each contiguous:
    bary (N*3), face (N), offset (N), quat (N*4), log_scale (N*3),
    opacity_logit (N), rgb (N*3). Then delta_pose and delta_expr, each with a
    shape header (u32 ndim, u64 dims). ``extra`` (e.g. a ``BAKE`` section)
    is appended verbatim.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(splats)))
    for arr in (splats.bary, splats.face, splats.offset, splats.quat, splats.log_scale,
                splats.opacity_logit, splats.color):
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    _write_array(buf, delta_pose)
    _write_array(buf, delta_expr)
    buf.write(extra)
    return buf.getvalue()


def decode_checkpoint(data: bytes):
    """Inverse of :func:`encode_checkpoint`; returns (splats, delta_pose, delta_expr, extra)."""
    buf = io.BytesIO(data)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise ValueError("not a UVGS checkpoint")
    version, n = struct.unpack("<IQ", buf.read(12))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")

    def take(width):
        raw = np.frombuffer(buf.read(4 * n * width), dtype="<f4").astype(np.float64)
        return raw.reshape(n, width) if width > 1 else raw

    bary = take(3)
    face = take(1).astype(np.int64)
    offset = take(1)
    quat = take(4)
    log_scale = take(3)
    opacity_logit = take(1)
    color = take(3)
    delta_pose = _read_array(buf)
    delta_expr = _read_array(buf)
    return SplatSet(face, bary, offset, quat, log_scale, opacity_logit, color), delta_pose, delta_expr, buf.read()


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write to a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_checkpoint(path, splats: SplatSet, delta_pose, delta_expr, extra: bytes = b"") -> None:
    atomic_write(path, encode_checkpoint(splats, delta_pose, delta_expr, extra))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def checkpoint_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
