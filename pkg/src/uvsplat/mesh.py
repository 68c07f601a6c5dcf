"""Template mesh storage, blendshape + linear-blend-skinning deformation, per-face
frames and UV-anchored positions.

Every function that takes part in training has a matching ``*_backward`` that
returns the adjoint; they are all exact (no finite differences).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .rotations import axis_angle_to_matrix

AREA_EPS = 1e-12
MIN_ATLAS_COVERAGE = 1e-3


class MeshError(ValueError):
    """Raised for malformed meshes, anchors or deformation inputs."""


def _tri_area_2d(p: np.ndarray) -> np.ndarray:
    a = p[..., 1, :] - p[..., 0, :]
    b = p[..., 2, :] - p[..., 0, :]
    return 0.5 * (a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0])


@dataclass(eq=False)
class TemplateMesh:
    """Neutral triangle mesh with UV atlas, blendshape bases and skinning data.

    ``uv_corners[f, i]`` is the UV coordinate of corner ``i`` of face ``f``.
    Bases have shape ``(num_coeffs, num_vertices, 3)``; ``skin_weights`` is
    ``(num_vertices, num_joints)`` and ``joint_rest`` holds one rigid 4x4 rest
    transform per joint (joint rotations pivot about these frames).
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv_corners: np.ndarray
    pose_basis: np.ndarray | None = None
    expr_basis: np.ndarray | None = None
    skin_weights: np.ndarray | None = None
    joint_rest: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        self.uv_corners = np.ascontiguousarray(self.uv_corners, dtype=np.float64)
        nv = len(self.vertices)
        if self.pose_basis is None:
            self.pose_basis = np.zeros((0, nv, 3))
        if self.expr_basis is None:
            self.expr_basis = np.zeros((0, nv, 3))
        if self.skin_weights is None:
            self.skin_weights = np.ones((nv, 1))
        if self.joint_rest is None:
            self.joint_rest = np.eye(4)[None].repeat(self.skin_weights.shape[1], axis=0)
        self.pose_basis = np.asarray(self.pose_basis, dtype=np.float64)
        self.expr_basis = np.asarray(self.expr_basis, dtype=np.float64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.joint_rest = np.asarray(self.joint_rest, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError("vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError("faces must be (F, 3)")
        if self.uv_corners.shape != (len(self.faces), 3, 2):
            raise MeshError("uv_corners must be (F, 3, 2)")
        for name in ("pose_basis", "expr_basis"):
            basis = getattr(self, name)
            if basis.ndim != 3 or basis.shape[1:] != (nv, 3):
                raise MeshError(f"{name} must be (K, {nv}, 3), got {basis.shape}")
        if self.skin_weights.shape[0] != nv:
            raise MeshError("skin_weights must have one row per vertex")
        if self.joint_rest.shape != (self.skin_weights.shape[1], 4, 4):
            raise MeshError("joint_rest must be (J, 4, 4)")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def num_joints(self) -> int:
        return self.skin_weights.shape[1]

    @cached_property
    def laplacian_adjacency(self) -> list[np.ndarray]:
        """Sorted neighbour indices for every vertex (edges of the triangles)."""
        f = self.faces
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        edges = np.concatenate([edges, edges[:, ::-1]])
        edges = np.unique(edges, axis=0)
        split = np.searchsorted(edges[:, 0], np.arange(self.num_vertices + 1))
        return [edges[split[i]:split[i + 1], 1] for i in range(self.num_vertices)]

    @cached_property
    def laplacian(self) -> sp.csr_matrix:
        """Uniform Laplacian ``L v_i = v_i - mean(neighbours of i)`` as a sparse matrix."""
        nv = self.num_vertices
        rows, cols, vals = [np.arange(nv)], [np.arange(nv)], [np.ones(nv)]
        for i, nbrs in enumerate(self.laplacian_adjacency):
            if len(nbrs):
                rows.append(np.full(len(nbrs), i))
                cols.append(nbrs)
                vals.append(np.full(len(nbrs), -1.0 / len(nbrs)))
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nv, nv)
        )

    @cached_property
    def rest_frames(self) -> "FaceFrames":
        return face_frames(self.vertices, self.faces)

    @cached_property
    def uv_areas(self) -> np.ndarray:
        return _tri_area_2d(self.uv_corners)

    @cached_property
    def _uv_grid(self) -> tuple[int, np.ndarray]:
        # cell -> candidate faces, padded with -1
        g = int(np.clip(np.sqrt(self.num_faces) * 2, 4, 512))
        lo = np.floor(self.uv_corners.min(axis=1) * g).astype(int).clip(0, g - 1)
        hi = np.floor(self.uv_corners.max(axis=1) * g).astype(int).clip(0, g - 1)
        buckets: list[list[int]] = [[] for _ in range(g * g)]
        for fi in range(self.num_faces):
            for cy in range(lo[fi, 1], hi[fi, 1] + 1):
                for cx in range(lo[fi, 0], hi[fi, 0] + 1):
                    buckets[cy * g + cx].append(fi)
        width = max(1, max(len(b) for b in buckets))
        table = np.full((g * g, width), -1, dtype=np.int64)
        for i, b in enumerate(buckets):
            table[i, : len(b)] = b
        return g, table

    def locate_uv(self, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Face index (-1 when outside the atlas) and barycentrics for UV points."""
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        g, table = self._uv_grid
        cell = np.floor(uv * g).astype(int).clip(0, g - 1)
        cand = table[cell[:, 1] * g + cell[:, 0]]  # (M, K)
        tri = self.uv_corners[np.maximum(cand, 0)]  # (M, K, 3, 2)
        p = uv[:, None, :]
        a, b, c = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
        v0, v1, v2 = b - a, c - a, p - a
        den = v0[..., 0] * v1[..., 1] - v1[..., 0] * v0[..., 1]
        den = np.where(den == 0, 1e-300, den)
        w1 = (v2[..., 0] * v1[..., 1] - v1[..., 0] * v2[..., 1]) / den
        w2 = (v0[..., 0] * v2[..., 1] - v2[..., 0] * v0[..., 1]) / den
        w0 = 1 - w1 - w2
        inside = (cand >= 0) & (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        hit = inside.any(axis=1)
        k = np.argmax(inside, axis=1)
        rows = np.arange(len(uv))
        face = np.where(hit, cand[rows, k], -1)
        bary = np.stack([w0[rows, k], w1[rows, k], w2[rows, k]], axis=-1)
        bary = np.clip(bary, 0, None)
        bary /= bary.sum(axis=1, keepdims=True)
        return face, bary

    def validate(self, check_overlap: bool = True) -> None:
        """Raise :class:`MeshError` if any stored invariant is violated."""
        if self.faces.min(initial=0) < 0 or self.faces.max(initial=0) >= self.num_vertices:
            raise MeshError("face index out of range")
        if np.any(self.rest_frames.area <= AREA_EPS):
            raise MeshError("degenerate face (zero world area)")
        if np.any(np.abs(self.uv_areas) <= AREA_EPS):
            raise MeshError("degenerate face (zero UV area)")
        if self.uv_corners.min() < 0 or self.uv_corners.max() > 1:
            raise MeshError("UV corners must lie in [0, 1]^2")
        w = self.skin_weights
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1) > 1e-6):
            raise MeshError("skin weight rows must be non-negative and sum to 1")
        if check_overlap:
            overlap = uv_overlap_area(self)
            if overlap >= 1e-10:
                raise MeshError(f"UV triangles overlap (total area {overlap:.3g})")


def uv_overlap_area(mesh: TemplateMesh) -> float:
    """Total pairwise interior intersection area of the UV triangles."""
    from shapely import STRtree, Polygon

    polys = [Polygon(t) for t in mesh.uv_corners]
    tree = STRtree(polys)
    left, right = tree.query(polys, predicate="intersects")
    total = 0.0
    for i, j in zip(left, right):
        if i < j:
            total += polys[i].intersection(polys[j]).area
    return total


@dataclass(frozen=True, eq=False)
class FaceFrames:
    """Per-face orthonormal frame ``[t b n]`` and the quantities its adjoint needs."""

    basis: np.ndarray  # (F, 3, 3), columns t, b, n
    normal: np.ndarray  # (F, 3)
    area: np.ndarray  # (F,)
    e1: np.ndarray
    e2: np.ndarray
    cross: np.ndarray
    e1_len: np.ndarray
    cross_len: np.ndarray


def face_frames(vertices: np.ndarray, faces: np.ndarray) -> FaceFrames:
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    e1 = v1 - v0
    e2 = v2 - v0
    cross = np.cross(e1, e2)
    cross_len = np.linalg.norm(cross, axis=1)
    e1_len = np.linalg.norm(e1, axis=1)
    n = cross / cross_len[:, None]
    t = e1 / e1_len[:, None]
    b = np.cross(n, t)
    basis = np.stack([t, b, n], axis=-1)
    return FaceFrames(basis, n, 0.5 * cross_len, e1, e2, cross, e1_len, cross_len)


@dataclass(frozen=True, eq=False)
class DeformState:
    """Posed mesh plus per-face rotation ``rot``, scale ``scale`` and unit ``normal``.

    Immutable; safe to share between threads.
    """

    mesh: TemplateMesh
    pose: np.ndarray
    expr: np.ndarray
    delta_pose: np.ndarray
    delta_expr: np.ndarray
    joint_rotations: np.ndarray | None
    shaped: np.ndarray
    skin_linear: np.ndarray | None
    vertices: np.ndarray
    frames: FaceFrames
    rot: np.ndarray
    scale: np.ndarray

    @property
    def normal(self) -> np.ndarray:
        return self.frames.normal


def _coeffs(values, count: int, name: str) -> np.ndarray:
    if values is None:
        return np.zeros(count)
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.shape != (count,):
        raise MeshError(f"{name} must have {count} entries, got {arr.size}")
    return arr


def _delta(values, like: np.ndarray, name: str) -> np.ndarray:
    if values is None:
        return np.zeros_like(like)
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != like.shape:
        raise MeshError(f"{name} must have shape {like.shape}, got {arr.shape}")
    return arr


def joint_transforms(mesh: TemplateMesh, joint_rotations: np.ndarray) -> np.ndarray:
    """Posed rigid transforms ``rest @ rot @ rest^-1`` per joint, shape (J, 4, 4)."""
    rotations = np.asarray(joint_rotations, dtype=np.float64)
    if rotations.shape != (mesh.num_joints, 3):
        raise MeshError(f"joint_rotations must be ({mesh.num_joints}, 3)")
    local = np.tile(np.eye(4), (mesh.num_joints, 1, 1))
    local[:, :3, :3] = axis_angle_to_matrix(rotations)
    return mesh.joint_rest @ local @ np.linalg.inv(mesh.joint_rest)


def deform(
    mesh: TemplateMesh,
    pose=None,
    expr=None,
    delta_pose=None,
    delta_expr=None,
    joint_rotations=None,
) -> DeformState:
    """Apply blendshapes (with learnable corrections) and then linear blend skinning.

    ``joint_rotations`` is an optional (J, 3) axis-angle array; ``None`` means
    every joint stays at rest and skinning is skipped, so zero coefficients
    reproduce the template exactly.
    """
    pose = _coeffs(pose, mesh.pose_basis.shape[0], "pose")
    expr = _coeffs(expr, mesh.expr_basis.shape[0], "expr")
    delta_pose = _delta(delta_pose, mesh.pose_basis, "delta_pose")
    delta_expr = _delta(delta_expr, mesh.expr_basis, "delta_expr")
    shaped = (
        mesh.vertices
        + np.tensordot(pose, mesh.pose_basis + delta_pose, axes=1)
        + np.tensordot(expr, mesh.expr_basis + delta_expr, axes=1)
    )
    skin_linear = None
    vertices = shaped
    if joint_rotations is not None:
        transforms = joint_transforms(mesh, joint_rotations)
        skin = np.einsum("vj,jab->vab", mesh.skin_weights, transforms)
        skin_linear = skin[:, :3, :3]
        vertices = np.einsum("vab,vb->va", skin_linear, shaped) + skin[:, :3, 3]
        joint_rotations = np.asarray(joint_rotations, dtype=np.float64)
    frames = face_frames(vertices, mesh.faces)
    rest = mesh.rest_frames
    rot = frames.basis @ np.swapaxes(rest.basis, 1, 2)
    scale = np.sqrt(frames.cross_len / rest.cross_len)
    return DeformState(
        mesh, pose, expr, delta_pose, delta_expr, joint_rotations,
        shaped, skin_linear, vertices, frames, rot, scale,
    )


def frames_backward(
    state: DeformState,
    d_rot: np.ndarray | None = None,
    d_scale: np.ndarray | None = None,
    d_normal: np.ndarray | None = None,
) -> np.ndarray:
    """Adjoint of the per-face frame computation; returns dL/d(vertices)."""
    fr = state.frames
    nf = len(fr.normal)
    rest = state.mesh.rest_frames
    t, n = fr.basis[..., 0], fr.basis[..., 2]
    g_t = np.zeros((nf, 3))
    g_b = np.zeros((nf, 3))
    g_n = np.zeros((nf, 3)) if d_normal is None else np.array(d_normal, dtype=np.float64)
    if d_rot is not None:
        g_basis = d_rot @ rest.basis
        g_t += g_basis[..., 0]
        g_b += g_basis[..., 1]
        g_n += g_basis[..., 2]
    # b = n x t
    g_n += np.cross(t, g_b)
    g_t += np.cross(g_b, n)
    # t = e1 / |e1|
    g_e1 = (g_t - t * np.sum(t * g_t, axis=1, keepdims=True)) / fr.e1_len[:, None]
    # n = c / |c|, scale = sqrt(|c| / |c0|)
    g_c = (g_n - n * np.sum(n * g_n, axis=1, keepdims=True)) / fr.cross_len[:, None]
    if d_scale is not None:
        g_c += (np.asarray(d_scale) / (2 * state.scale * rest.cross_len))[:, None] * n
    # c = e1 x e2
    g_e1 += np.cross(fr.e2, g_c)
    g_e2 = np.cross(g_c, fr.e1)
    faces = state.mesh.faces
    d_vertices = np.zeros_like(state.vertices)
    np.add.at(d_vertices, faces[:, 0], -(g_e1 + g_e2))
    np.add.at(d_vertices, faces[:, 1], g_e1)
    np.add.at(d_vertices, faces[:, 2], g_e2)
    return d_vertices


def deform_backward(state: DeformState, d_vertices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. (delta_pose, delta_expr) from dL/d(posed vertices)."""
    g = np.asarray(d_vertices, dtype=np.float64)
    if state.skin_linear is not None:
        g = np.einsum("vab,va->vb", state.skin_linear, g)
    return np.multiply.outer(state.pose, g), np.multiply.outer(state.expr, g)


def _check_faces(state: DeformState, face: np.ndarray) -> None:
    if face.size and (face.min() < 0 or face.max() >= state.mesh.num_faces):
        raise MeshError("anchor face index out of range")


def anchor_positions(state: DeformState, face, bary, offset) -> np.ndarray:
    """World positions ``sum_i w_i v_i + d * n_f`` for arrays of anchors."""
    face = np.asarray(face, dtype=np.int64)
    _check_faces(state, face)
    bary = np.asarray(bary, dtype=np.float64)
    tri = state.vertices[state.mesh.faces[face]]  # (N, 3, 3)
    return (
        bary[..., 0, None] * tri[..., 0, :]
        + bary[..., 1, None] * tri[..., 1, :]
        + bary[..., 2, None] * tri[..., 2, :]
        + np.asarray(offset, dtype=np.float64)[..., None] * state.frames.normal[face]
    )


def anchor_positions_backward(state: DeformState, face, bary, offset, d_mu):
    """Returns (dL/d vertices, dL/d face normals, dL/d offset)."""
    face = np.asarray(face, dtype=np.int64)
    d_mu = np.asarray(d_mu, dtype=np.float64)
    d_vertices = np.zeros_like(state.vertices)
    corners = state.mesh.faces[face]
    for i in range(3):
        np.add.at(d_vertices, corners[:, i], bary[:, i, None] * d_mu)
    d_normal = np.zeros_like(state.frames.normal)
    np.add.at(d_normal, face, np.asarray(offset)[:, None] * d_mu)
    d_offset = np.sum(d_mu * state.frames.normal[face], axis=1)
    return d_vertices, d_normal, d_offset


def uv_to_world(state: DeformState, anchor) -> np.ndarray:
    """World position of a single :class:`~uvsplat.splats.UvAnchor`."""
    if not 0 <= int(anchor.face) < state.mesh.num_faces:
        raise MeshError(f"invalid face index {anchor.face}")
    return anchor_positions(
        state, np.array([anchor.face]), np.asarray(anchor.bary)[None], np.array([anchor.offset])
    )[0]


def sample_uv_uniform(mesh: TemplateMesh, count: int, rng_seed=None):
    """Rejection-sample ``count`` anchors uniformly over the UV atlas.

    Returns ``(face, bary)`` arrays; offsets start at zero.
    """
    if count < 1:
        raise MeshError("count must be >= 1")
    coverage = float(np.abs(mesh.uv_areas).sum())
    if coverage < MIN_ATLAS_COVERAGE:
        raise MeshError(f"atlas covers only {coverage:.2g} of the unit square")
    rng = np.random.default_rng(rng_seed)
    faces, barys = [], []
    found = 0
    while found < count:
        batch = int(min(max((count - found) / coverage * 1.2, 64), 4_000_000))
        face, bary = mesh.locate_uv(rng.random((batch, 2)))
        hit = face >= 0
        faces.append(face[hit])
        barys.append(bary[hit])
        found += int(hit.sum())
    return np.concatenate(faces)[:count], np.concatenate(barys)[:count]


def laplacian_loss(state: DeformState, mesh: TemplateMesh | None = None) -> float:
    """Mean squared uniform-Laplacian magnitude over vertices."""
    mesh = state.mesh if mesh is None else mesh
    lv = mesh.laplacian @ state.vertices
    return float(np.sum(lv * lv) / mesh.num_vertices)


def laplacian_loss_backward(state: DeformState, mesh: TemplateMesh | None = None) -> np.ndarray:
    mesh = state.mesh if mesh is None else mesh
    lv = mesh.laplacian @ state.vertices
    return (2.0 / mesh.num_vertices) * (mesh.laplacian.T @ lv)


def anchor_loss(state: DeformState, reference: DeformState) -> float:
    """Mean squared distance between corresponding vertices of two deformations."""
    diff = state.vertices - reference.vertices
    return float(np.sum(diff * diff) / len(diff))


def anchor_loss_backward(state: DeformState, reference: DeformState) -> np.ndarray:
    return (2.0 / len(state.vertices)) * (state.vertices - reference.vertices)


# --------------------------------------------------------------------------- IO


def save_obj(mesh: TemplateMesh, path: str | os.PathLike) -> None:
    """Write ``v``/``vt``/``f a/ta`` lines; one ``vt`` per distinct UV corner."""
    uv = mesh.uv_corners.reshape(-1, 2)
    uniq, inverse = np.unique(uv, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1, 3)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"vt {u:.17g} {v:.17g}" for u, v in uniq]
    for f, t in zip(mesh.faces + 1, inverse + 1):
        lines.append(f"f {f[0]}/{t[0]} {f[1]}/{t[1]} {f[2]}/{t[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parse the OBJ subset; returns ``(vertices, faces, uv_corners)``."""
    verts, uvs, faces, face_uv = [], [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif tag == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif tag == "f":
            if len(parts) != 4:
                raise MeshError(f"line {lineno}: only triangles are supported")
            idx = [p.split("/") for p in parts[1:]]
            if any(len(i) < 2 or not i[1] for i in idx):
                raise MeshError(f"line {lineno}: faces need v/vt pairs")
            faces.append([int(i[0]) - 1 for i in idx])
            face_uv.append([int(i[1]) - 1 for i in idx])
        else:
            raise MeshError(f"line {lineno}: unsupported OBJ statement {tag!r}")
    uvs_arr = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
    return (
        np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        np.asarray(faces, dtype=np.int64).reshape(-1, 3),
        uvs_arr[np.asarray(face_uv, dtype=np.int64).reshape(-1, 3)],
    )


def _array_doc(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def _array_from_doc(doc: dict, name: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in doc["shape"])
        return np.asarray(doc["data"], dtype=np.float64).reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise MeshError(f"blendshape document: bad array {name!r}") from exc


def save_mesh(mesh: TemplateMesh, obj_path, blendshape_path) -> None:
    save_obj(mesh, obj_path)
    doc = {
        "version": 1,
        "num_vertices": mesh.num_vertices,
        "pose_basis": _array_doc(mesh.pose_basis),
        "expr_basis": _array_doc(mesh.expr_basis),
        "skin_weights": _array_doc(mesh.skin_weights),
        "joints": _array_doc(mesh.joint_rest),
    }
    Path(blendshape_path).write_text(json.dumps(doc))


def load_mesh(obj_path, blendshape_path=None) -> TemplateMesh:
    vertices, faces, uv = load_obj(obj_path)
    if blendshape_path is None:
        return TemplateMesh(vertices, faces, uv)
    doc = json.loads(Path(blendshape_path).read_text())
    return TemplateMesh(
        vertices,
        faces,
        uv,
        pose_basis=_array_from_doc(doc["pose_basis"], "pose_basis"),
        expr_basis=_array_from_doc(doc["expr_basis"], "expr_basis"),
        skin_weights=_array_from_doc(doc["skin_weights"], "skin_weights"),
        joint_rest=_array_from_doc(doc["joints"], "joints"),
    )
