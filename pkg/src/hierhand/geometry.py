"""Rotation utilities shared across the pose pipeline.

Quaternions use scalar-first ``(w, x, y, z)`` layout, float64, unit length.
Most helpers broadcast over arbitrary leading dimensions.

Bone orientation convention: a bone at rest points along
``CANONICAL_BONE_AXIS``, which is "up on screen" in image coordinates
(y grows downward).  A bone rotation is an intrinsic Z-X-Y Euler triple
``(swing, bend, twist)`` applied in the frame that carries the canonical
axis onto the parent bone direction.  The twist component rotates about
the bone axis itself and therefore never moves the child joint; it is
carried in pose vectors for completeness but ignored by the direction
math, and inverse computations report it as zero.
"""

from __future__ import annotations

import numpy as np

CANONICAL_BONE_AXIS = np.array([0.0, -1.0, 0.0])


def unit(v: np.ndarray) -> np.ndarray:
    """Normalize vectors along the last axis."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n


def wrap_angle(x):
    """Wrap angles into (-pi, pi]."""
    x = np.asarray(x, dtype=float)
    wrapped = np.remainder(x + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Flip sign so the scalar part is non-negative.

    When w is exactly zero the first nonzero component is made positive so
    equality comparisons are stable.
    """
    q = np.asarray(q, dtype=float)
    key = np.where(q[..., 0] != 0.0, np.sign(q[..., 0]), 0.0)
    for i in (1, 2, 3):
        key = np.where((key == 0.0) & (q[..., i] != 0.0), np.sign(q[..., i]), key)
    key = np.where(key == 0.0, 1.0, key)
    return q * key[..., None]


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w1, x1, y1, z1 = (a[..., i] for i in range(4))
    w2, x2, y2, z2 = (b[..., i] for i in range(4))
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) to rotation matrix, shape (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = (q[..., i] for i in range(4))
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (single matrix, branch method)."""
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return quat_canonical(quat_normalize(q))


def quat_from_rotvec(v: np.ndarray) -> np.ndarray:
    """Axis-angle vector(s) (axis * angle) to unit quaternion(s)."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v, axis=-1)
    half = 0.5 * angle
    # series for sin(a/2)/a near zero keeps the map smooth at the identity
    small = angle < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(small, 0.5 - angle * angle / 48.0, np.sin(half) / np.where(angle == 0, 1.0, angle))
    w = np.cos(half)
    xyz = v * scale[..., None]
    return np.concatenate([w[..., None], xyz], axis=-1)


def quat_rotation_angle(a: np.ndarray, b: np.ndarray):
    """Angle in [0, pi] of the relative rotation between two unit quaternions."""
    rel = quat_multiply(quat_conjugate(np.asarray(a, dtype=float)), np.asarray(b, dtype=float))
    ang = 2.0 * np.arctan2(np.linalg.norm(rel[..., 1:], axis=-1), np.abs(rel[..., 0]))
    if np.ndim(ang) == 0:
        return float(ang)
    return ang


def random_unit_quaternion(rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Uniformly distributed unit quaternion(s)."""
    shape = (4,) if n is None else (n, 4)
    q = rng.standard_normal(shape)
    return quat_canonical(quat_normalize(q))


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation matrix carrying unit vector ``a`` onto unit vector ``b``.

    Antiparallel inputs fall back to a half turn about a deterministic
    perpendicular axis.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = float(np.dot(a, b))
    if c < -1.0 + 1e-12:
        perp = np.cross(a, np.array([1.0, 0.0, 0.0]))
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, np.array([0.0, 1.0, 0.0]))
        p = perp / np.linalg.norm(perp)
        return 2.0 * np.outer(p, p) - np.eye(3)
    v = np.cross(a, b)
    k = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + k + k @ k / (1.0 + c)


def bone_direction(angles: np.ndarray) -> np.ndarray:
    """Unit direction of a bone given its (swing, bend, twist) Euler triple.

    The result is expressed in the parent bone frame; twist is ignored by
    construction (it spins the bone about its own axis).
    """
    angles = np.asarray(angles, dtype=float)
    alpha = angles[..., 0]
    beta = angles[..., 1]
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    return np.stack([sa * cb, -ca * cb, -sb], axis=-1)


def bone_angles(direction: np.ndarray) -> np.ndarray:
    """Inverse of :func:`bone_direction`; twist reported as zero.

    ``direction`` must be unit length.  Returns (..., 3) Euler triples with
    swing in (-pi, pi] and bend in [-pi/2, pi/2].
    """
    d = np.asarray(direction, dtype=float)
    beta = np.arcsin(np.clip(-d[..., 2], -1.0, 1.0))
    alpha = np.arctan2(d[..., 0], -d[..., 1])
    return np.stack([alpha, beta, np.zeros_like(alpha)], axis=-1)
