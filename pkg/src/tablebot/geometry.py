"""Quaternion helpers. Quaternions are (w, x, y, z); the toy world only uses
yaw rotations, i.e. (cos t/2, 0, 0, sin t/2)."""

from __future__ import annotations

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0], dtype=np.float32)


def canonicalize_quaternion(q: np.ndarray) -> np.ndarray:
    """Normalize to unit length and flip sign so the scalar part is >= 0.

    Near-zero quaternions map to the identity. Idempotent; q and -q agree.
    """
    q = np.asarray(q, dtype=np.float32).reshape(4)
    norm = float(np.linalg.norm(q))
    if norm < 1e-8:
        return IDENTITY_QUAT.copy()
    q = q / np.float32(norm)
    if q[0] < 0:
        q = -q
    return q.astype(np.float32)


def yaw_from_quaternion(q: np.ndarray) -> float:
    q = canonicalize_quaternion(q)
    return float(2.0 * np.arctan2(q[3], q[0]))


def yaw_quaternion(theta: float) -> np.ndarray:
    q = np.array([np.cos(theta / 2.0), 0.0, 0.0, np.sin(theta / 2.0)], dtype=np.float32)
    return canonicalize_quaternion(q)
