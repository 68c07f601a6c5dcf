"""Synthetic animated-head scenes rendered by a textured-triangle z-buffer
rasterizer. Nothing here touches the splatting code, so fitting splats to
these frames is a genuine reconstruction task.

On-disk layout::

    scene.json         generator config, seed, background
    mesh.obj           template mesh (OBJ subset)
    blendshapes.json   pose/expression bases, skin weights, joints
    texture.ppm        ground-truth albedo in UV space
    cameras.json       one pinhole camera per frame
    coeffs.json        per-frame pose/expression/joint coefficients and split
    frames/%04d.ppm    rendered frames
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .imageio import read_image, write_image
from .mesh import TemplateMesh, deform, load_mesh, save_mesh
from .splats import Camera


class SceneError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    num_frames: int = 20
    width: int = 64
    height: int = 64
    focal: float = 70.0
    radius: float = 3.2
    yaw_deg: float = 30.0
    elevation: float = 0.0
    background: tuple[float, float, float] = (0.30, 0.33, 0.38)
    texture_res: int = 256
    supersample: int = 4
    rings: int = 14
    segments: int = 40
    cap_deg: float = 110.0
    radii: tuple[float, float, float] = (0.85, 1.0, 0.9)
    expr_amplitude: float = 1.0
    pose_amplitude: float = 1.0
    nod_amplitude: float = 0.08
    test_every: int = 5

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        cfg = cls(**known)
        cfg.background = tuple(float(x) for x in cfg.background)
        cfg.radii = tuple(float(x) for x in cfg.radii)
        return cfg


@dataclass
class Frame:
    index: int
    camera: Camera
    pose: np.ndarray
    expr: np.ndarray
    joint_rotations: np.ndarray
    image: np.ndarray | None
    split: str


@dataclass
class SyntheticScene:
    mesh: TemplateMesh
    texture: np.ndarray
    frames: list[Frame]
    background: np.ndarray
    config: SceneConfig
    seed: int = 0

    def split(self, name: str) -> list[Frame]:
        if name == "all":
            return list(self.frames)
        return [f for f in self.frames if f.split == name]


# ------------------------------------------------------------------ geometry


def make_head_mesh(rings: int = 14, segments: int = 40, cap_deg: float = 110.0,
                   radii=(0.85, 1.0, 0.9)) -> TemplateMesh:
    """Ellipsoidal cap facing +z with a polar UV layout, three expression
    bases, one pose basis and a single neck joint."""
    a, b, c = radii
    theta = np.deg2rad(cap_deg) * np.arange(1, rings + 1) / rings
    phi = 2 * np.pi * np.arange(segments) / segments
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    ring_pts = np.stack([a * np.sin(tt) * np.cos(pp), b * np.sin(tt) * np.sin(pp), c * np.cos(tt)], -1)
    vertices = np.concatenate([[[0.0, 0.0, c]], ring_pts.reshape(-1, 3)])
    rho = 0.47 * tt / np.deg2rad(cap_deg)
    ring_uv = np.stack([0.5 + rho * np.cos(pp), 0.5 - rho * np.sin(pp)], -1)
    uv = np.concatenate([[[0.5, 0.5]], ring_uv.reshape(-1, 2)])

    def vid(ring, seg):
        return 1 + ring * segments + seg % segments

    faces = []
    for j in range(segments):
        faces.append([0, vid(0, j), vid(0, j + 1)])
    for i in range(rings - 1):
        for j in range(segments):
            p, q, r, s = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            faces += [[p, q, r], [p, r, s]]
    faces = np.asarray(faces)

    x, y, z = vertices.T
    front = np.clip(z / c + 0.3, 0, 1)
    normals = vertices / np.array([a * a, b * b, c * c])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    jaw = np.exp(-((y + 0.55) ** 2) / 0.08) * front
    cheek = (np.exp(-((x - 0.5) ** 2 + (y + 0.1) ** 2) / 0.06)
             + np.exp(-((x + 0.5) ** 2 + (y + 0.1) ** 2) / 0.06)) * front
    brow = np.exp(-((y - 0.35) ** 2) / 0.03) * front
    expr_basis = np.stack([
        np.stack([0 * x, -0.12 * jaw, 0.04 * jaw], -1),
        0.08 * cheek[:, None] * normals,
        np.stack([0 * x, 0.06 * brow, 0 * x], -1),
    ])
    pose_basis = np.stack([np.stack([0.04 * y, 0 * y, 0 * y], -1)])
    joint = np.eye(4)
    joint[:3, 3] = [0.0, -1.1, 0.0]
    return TemplateMesh(vertices, faces, uv[faces], pose_basis, expr_basis,
                        np.ones((len(vertices), 1)), joint[None])


def _smoothstep_mask(d: np.ndarray, width: float) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(np.clip(d / width, -60, 60)))


def make_texture(res: int = 256, seed: int = 0) -> np.ndarray:
    """Procedural face-like albedo over the unit UV square, shape (res, res, 3)."""
    rng = np.random.default_rng(seed)
    v, u = (np.mgrid[0:res, 0:res] + 0.5) / res
    ph = rng.uniform(0, 2 * np.pi, 4)
    skin = np.array([0.82, 0.60, 0.48])
    tex = np.broadcast_to(skin, (res, res, 3)).copy()
    tex += 0.05 * np.sin(2 * np.pi * (1.5 * u) + ph[0])[..., None] * np.array([1.0, 0.6, 0.4])
    tex += 0.04 * np.sin(2 * np.pi * (2.0 * v) + ph[1])[..., None] * np.array([0.5, 0.8, 1.0])
    rho = np.hypot(u - 0.5, v - 0.5)
    hair = _smoothstep_mask(-(rho - 0.2) + 0.4 * np.clip(v - 0.5, 0, None) * 4, 0.015)
    hair *= _smoothstep_mask(v - 0.55, 0.02)
    tex = tex * (1 - hair[..., None]) + np.array([0.28, 0.17, 0.10]) * hair[..., None]
    for cx in (0.44, 0.56):
        ex, ey = (u - cx) / 0.035, (v - 0.46) / 0.02
        white = _smoothstep_mask(np.hypot(ex, ey) - 1.0, 0.15)
        tex = tex * (1 - white[..., None]) + np.array([0.92, 0.90, 0.88]) * white[..., None]
        iris = _smoothstep_mask(np.hypot(u - cx, v - 0.46) - 0.014, 0.003)
        tex = tex * (1 - iris[..., None]) + np.array([0.20, 0.25, 0.35]) * iris[..., None]
    mouth = _smoothstep_mask(np.hypot((u - 0.5) / 0.06, (v - 0.585) / 0.018) - 1.0, 0.12)
    tex = tex * (1 - mouth[..., None]) + np.array([0.72, 0.22, 0.25]) * mouth[..., None]
    brow = _smoothstep_mask(np.hypot((np.abs(u - 0.5) - 0.06) / 0.04, (v - 0.425) / 0.007) - 1.0, 0.2)
    tex = tex * (1 - brow[..., None]) + np.array([0.30, 0.20, 0.12]) * brow[..., None]
    return np.clip(tex, 0.0, 1.0)


def sample_texture(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup with clamp-to-edge; texel centres at ``(i + 0.5) / res``."""
    h, w = texture.shape[:2]
    x = np.clip(uv[..., 0] * w - 0.5, 0, w - 1)
    y = np.clip(uv[..., 1] * h - 0.5, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2)
    y0 = np.minimum(np.floor(y).astype(int), h - 2)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    return ((1 - fy) * ((1 - fx) * texture[y0, x0] + fx * texture[y0, x0 + 1])
            + fy * ((1 - fx) * texture[y0 + 1, x0] + fx * texture[y0 + 1, x0 + 1]))


def rasterize_mesh(vertices: np.ndarray, faces: np.ndarray, uv_corners: np.ndarray,
                   texture: np.ndarray, cam: Camera, background, supersample: int = 4) -> np.ndarray:
    """Unlit textured z-buffer rendering with a box-filtered ``supersample^2`` grid."""
    ss = supersample
    h, w = cam.height * ss, cam.width * ss
    pc = vertices @ cam.rotation.T + cam.translation
    z = pc[:, 2]
    sx = (cam.fx * pc[:, 0] / z + cam.cx) * ss
    sy = (cam.fy * pc[:, 1] / z + cam.cy) * ss
    depth = np.full((h, w), np.inf)
    face_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    for fi, (i0, i1, i2) in enumerate(faces):
        if min(z[i0], z[i1], z[i2]) <= cam.near:
            continue
        xs = np.array([sx[i0], sx[i1], sx[i2]])
        ys = np.array([sy[i0], sy[i1], sy[i2]])
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if abs(area) < 1e-12:
            continue
        c0 = max(int(np.floor(xs.min() - 0.5)), 0)
        c1 = min(int(np.ceil(xs.max() - 0.5)), w - 1)
        r0 = max(int(np.floor(ys.min() - 0.5)), 0)
        r1 = min(int(np.ceil(ys.max() - 0.5)), h - 1)
        if c0 > c1 or r0 > r1:
            continue
        py, px = np.mgrid[r0:r1 + 1, c0:c1 + 1] + 0.5
        l1 = ((px - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (py - ys[0])) / area
        l2 = ((xs[1] - xs[0]) * (py - ys[0]) - (px - xs[0]) * (ys[1] - ys[0])) / area
        l0 = 1 - l1 - l2
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        inv_z = l0 / z[i0] + l1 / z[i1] + l2 / z[i2]
        zz = 1.0 / inv_z
        win = depth[r0:r1 + 1, c0:c1 + 1]
        closer = inside & (zz < win)
        if not closer.any():
            continue
        pw = np.stack([l0 / z[i0], l1 / z[i1], l2 / z[i2]], -1) * zz[..., None]
        win[closer] = zz[closer]
        face_id[r0:r1 + 1, c0:c1 + 1][closer] = fi
        bary[r0:r1 + 1, c0:c1 + 1][closer] = pw[closer]
    hit = face_id >= 0
    out = np.broadcast_to(np.asarray(background, dtype=np.float64), (h, w, 3)).copy()
    uv = np.einsum("nk,nkd->nd", bary[hit], uv_corners[face_id[hit]])
    out[hit] = sample_texture(texture, uv)
    return out.reshape(cam.height, ss, cam.width, ss, 3).mean(axis=(1, 3))


# ------------------------------------------------------------------ scenes


def orbit_camera(index: int, cfg: SceneConfig) -> Camera:
    yaw = np.deg2rad(np.linspace(-cfg.yaw_deg, cfg.yaw_deg, cfg.num_frames)[index]) if cfg.num_frames > 1 else 0.0
    pos = np.array([cfg.radius * np.sin(yaw), cfg.elevation, cfg.radius * np.cos(yaw)])
    return Camera.look_at(pos, [0.0, 0.0, 0.0], fx=cfg.focal, fy=cfg.focal, width=cfg.width, height=cfg.height)


def _coefficient_tracks(cfg: SceneConfig, mesh: TemplateMesh, rng: np.random.Generator):
    n = cfg.num_frames
    t = np.arange(n) / max(n, 1)
    def track(count, amp):
        freq = rng.uniform(1.0, 2.5, count)
        phase = rng.uniform(0, 2 * np.pi, count)
        return amp * 0.5 * (1 + np.sin(2 * np.pi * freq[None] * t[:, None] + phase[None]))
    expr = track(mesh.expr_basis.shape[0], cfg.expr_amplitude)
    pose = track(mesh.pose_basis.shape[0], cfg.pose_amplitude) * 2 - cfg.pose_amplitude
    nod_phase = rng.uniform(0, 2 * np.pi)
    joint = np.zeros((n, mesh.num_joints, 3))
    joint[:, 0, 0] = cfg.nod_amplitude * np.sin(2 * np.pi * t + nod_phase)
    return pose, expr, joint


def _inside_ellipsoid(point: np.ndarray, radii) -> bool:
    return float(np.sum((point / np.asarray(radii)) ** 2)) < 1.0


def generate_scene(cfg: SceneConfig, seed: int = 0, render_images: bool = True) -> SyntheticScene:
    if cfg.num_frames < 1:
        raise SceneError("num_frames must be >= 1")
    rng = np.random.default_rng(seed)
    mesh = make_head_mesh(cfg.rings, cfg.segments, cfg.cap_deg, cfg.radii)
    texture = make_texture(cfg.texture_res, seed)
    pose, expr, joint = _coefficient_tracks(cfg, mesh, rng)
    frames = []
    for i in range(cfg.num_frames):
        cam = orbit_camera(i, cfg)
        if _inside_ellipsoid(cam.position, cfg.radii):
            raise SceneError(f"camera {i} lies inside the mesh")
        image = None
        if render_images:
            state = deform(mesh, pose[i], expr[i], joint_rotations=joint[i])
            image = rasterize_mesh(state.vertices, mesh.faces, mesh.uv_corners, texture, cam,
                                   cfg.background, cfg.supersample)
        split = "test" if cfg.test_every and cfg.num_frames > 1 and i % cfg.test_every == cfg.test_every // 2 else "train"
        frames.append(Frame(i, cam, pose[i], expr[i], joint[i], image, split))
    return SyntheticScene(mesh, texture, frames, np.asarray(cfg.background), cfg, seed)


def save_scene(scene: SyntheticScene, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    save_mesh(scene.mesh, out / "mesh.obj", out / "blendshapes.json")
    write_image(out / "texture.ppm", scene.texture)
    cfg = asdict(scene.config)
    (out / "scene.json").write_text(json.dumps({"seed": scene.seed, "config": cfg}, indent=2))
    (out / "cameras.json").write_text(json.dumps([f.camera.to_dict() for f in scene.frames], indent=1))
    coeffs = [
        {"frame": f.index, "pose": f.pose.tolist(), "expr": f.expr.tolist(),
         "joint_rotations": f.joint_rotations.tolist(), "split": f.split}
        for f in scene.frames
    ]
    (out / "coeffs.json").write_text(json.dumps(coeffs, indent=1))
    for f in scene.frames:
        write_image(out / "frames" / f"{f.index:04d}.ppm", f.image)
    return out


def synth(cfg: SceneConfig, seed: int, out_dir: str | os.PathLike) -> SyntheticScene:
    scene = generate_scene(cfg, seed)
    save_scene(scene, out_dir)
    # reload so that training sees the quantized frames exactly as stored
    return load_scene(out_dir)


def load_scene(path: str | os.PathLike) -> SyntheticScene:
    root = Path(path)
    try:
        meta = json.loads((root / "scene.json").read_text())
        cameras = json.loads((root / "cameras.json").read_text())
        coeffs = json.loads((root / "coeffs.json").read_text())
    except FileNotFoundError as exc:
        raise SceneError(f"{root} is not a scene directory: {exc}") from exc
    cfg = SceneConfig.from_dict(meta["config"])
    mesh = load_mesh(root / "mesh.obj", root / "blendshapes.json")
    frames = []
    for cam_doc, co in zip(cameras, coeffs):
        idx = int(co["frame"])
        img_path = root / "frames" / f"{idx:04d}.ppm"
        frames.append(Frame(
            idx, Camera.from_dict(cam_doc), np.asarray(co["pose"], dtype=np.float64),
            np.asarray(co["expr"], dtype=np.float64), np.asarray(co["joint_rotations"], dtype=np.float64),
            read_image(img_path) if img_path.exists() else None, co["split"],
        ))
    texture = read_image(root / "texture.ppm")
    return SyntheticScene(mesh, texture, frames, np.asarray(cfg.background), cfg, int(meta["seed"]))
