"""Rotation helpers: axis-angle (Rodrigues), quaternions, and analytic derivatives.

Axis-angle vectors are the canonical rotation parameterization throughout the
package; quaternions (w, x, y, z, unit norm) are used where a 4-vector storage
layout is convenient (Gaussian covariance orientation).
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-12


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix [v]x for (..., 3) input, shape (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def rodrigues(r: np.ndarray) -> np.ndarray:
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3).

    Uses the series form for small angles so the map is smooth through zero.
    """
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    K = skew(r)
    K2 = K @ K
    small = theta < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(theta) / np.maximum(theta, _EPS))
        b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(theta)) / np.maximum(theta, _EPS) ** 2)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * K2


def rodrigues_jacobian(r: np.ndarray) -> np.ndarray:
    """Derivative of rodrigues(r) w.r.t. each component, shape (..., 3, 3, 3).

    Output[..., k] = dR/dr_k.  Closed form from Gallego & Yezzi; falls back to
    the exact zero-angle limit dR/dr_k = [e_k]x when the angle vanishes.
    """
    r = np.asarray(r, dtype=float)
    batch = r.shape[:-1]
    R = rodrigues(r)
    theta2 = np.sum(r * r, axis=-1)
    out = np.empty(batch + (3, 3, 3))
    eye = np.eye(3)
    ImR = eye - R
    for k in range(3):
        e_k = eye[k]
        # v x ((I - R) e_k), batched over leading dims
        w = np.cross(r, ImR[..., :, k], axis=-1)
        num = r[..., k, None, None] * skew(r) + skew(w)
        with np.errstate(invalid="ignore", divide="ignore"):
            dR = (num / np.maximum(theta2, _EPS)[..., None, None]) @ R
        out[..., k] = np.where(theta2[..., None, None] < 1e-16, skew(e_k), dR)
    return out


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) wxyz -> rotation matrices (..., 3, 3)."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of (..., 4) wxyz quaternions."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_from_axis_angle(r: np.ndarray) -> np.ndarray:
    """Axis-angle (..., 3) -> unit quaternion (..., 4) wxyz."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    half = 0.5 * theta
    small = theta < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / np.maximum(theta, _EPS))
    out = np.empty(r.shape[:-1] + (4,))
    out[..., 0] = np.cos(half)
    out[..., 1:] = r * s[..., None]
    return out
