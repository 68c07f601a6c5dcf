"""Batched quaternion / axis-angle / matrix conversions with their adjoints.

Quaternions are stored scalar-first, ``(w, x, y, z)``.
"""
from __future__ import annotations

import numpy as np

_SMALL_ANGLE = 1e-4


def normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b``; broadcasts over leading axes."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (not necessarily unit) quaternions, shape (..., 3, 3).

    The quaternion is normalized first, so ``q`` and ``-q`` (and any positive
    multiple) give the same matrix.
    """
    w, x, y, z = np.moveaxis(normalize_quat(q), -1, 0)
    r = np.empty(w.shape + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_to_matrix_backward(q: np.ndarray, d_r: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw quaternion given ``d_r = dL/dR`` (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    g = d_r
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    gn = np.stack([gw, gx, gy, gz], axis=-1)
    return (gn - qn * np.sum(qn * gn, axis=-1, keepdims=True)) / norm


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Unit quaternions (w >= 0) for rotation matrices (..., 3, 3)."""
    r = np.asarray(r, dtype=np.float64)
    m00, m11, m22 = r[..., 0, 0], r[..., 1, 1], r[..., 2, 2]
    # Squared magnitudes of each component; pick the largest for stability.
    mags = np.stack(
        [1 + m00 + m11 + m22, 1 + m00 - m11 - m22, 1 - m00 + m11 - m22, 1 - m00 - m11 + m22],
        axis=-1,
    )
    best = np.argmax(mags, axis=-1)
    s = np.sqrt(np.maximum(np.take_along_axis(mags, best[..., None], -1)[..., 0], 1e-300)) * 2
    q = np.empty(r.shape[:-2] + (4,))
    c0, c1, c2, c3 = (best == i for i in range(4))
    q[c0] = np.stack([s[c0] / 4, (r[c0][:, 2, 1] - r[c0][:, 1, 2]) / s[c0],
                      (r[c0][:, 0, 2] - r[c0][:, 2, 0]) / s[c0], (r[c0][:, 1, 0] - r[c0][:, 0, 1]) / s[c0]], -1)
    q[c1] = np.stack([(r[c1][:, 2, 1] - r[c1][:, 1, 2]) / s[c1], s[c1] / 4,
                      (r[c1][:, 0, 1] + r[c1][:, 1, 0]) / s[c1], (r[c1][:, 0, 2] + r[c1][:, 2, 0]) / s[c1]], -1)
    q[c2] = np.stack([(r[c2][:, 0, 2] - r[c2][:, 2, 0]) / s[c2], (r[c2][:, 0, 1] + r[c2][:, 1, 0]) / s[c2],
                      s[c2] / 4, (r[c2][:, 1, 2] + r[c2][:, 2, 1]) / s[c2]], -1)
    q[c3] = np.stack([(r[c3][:, 1, 0] - r[c3][:, 0, 1]) / s[c3], (r[c3][:, 0, 2] + r[c3][:, 2, 0]) / s[c3],
                      (r[c3][:, 1, 2] + r[c3][:, 2, 1]) / s[c3], s[c3] / 4], -1)
    q = np.where(q[..., :1] < 0, -q, q)
    return normalize_quat(q)


def axis_angle_to_quat(v: np.ndarray) -> np.ndarray:
    """Exponential map; the zero vector maps to the identity quaternion."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)
    half = 0.5 * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # sin(theta/2)/theta, series near zero
    f = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half)[..., None], f[..., None] * v], axis=-1)


def axis_angle_to_quat_backward(v: np.ndarray, d_q: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    half = 0.5 * theta
    f = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    # f'(theta) / theta
    fp_over_t = np.where(
        small, -1.0 / 24.0 + theta**2 / 960.0,
        (0.5 * safe * np.cos(half) - np.sin(half)) / safe**3,
    )
    gw = d_q[..., 0]
    gv = d_q[..., 1:]
    vg = np.sum(v * gv, axis=-1)
    return (-0.5 * f * gw)[..., None] * v + f[..., None] * gv + (fp_over_t * vg)[..., None] * v


def quat_to_axis_angle(q: np.ndarray) -> np.ndarray:
    q = normalize_quat(q)
    q = np.where(q[..., :1] < 0, -q, q)
    vec = q[..., 1:]
    s = np.linalg.norm(vec, axis=-1)
    theta = 2 * np.arctan2(s, q[..., 0])
    small = s < 1e-12
    scale = np.where(small, 2.0, theta / np.where(small, 1.0, s))
    return scale[..., None] * vec


def axis_angle_to_matrix(v: np.ndarray) -> np.ndarray:
    return quat_to_matrix(axis_angle_to_quat(v))
