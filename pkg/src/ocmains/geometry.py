"""Quaternion and rotation primitives shared by every other module.

Conventions:

* Quaternions are scalar-first ``[w, x, y, z]`` numpy arrays of unit norm.
* ``to_rot(q)`` maps body coordinates into navigation coordinates,
  ``v_nav = R @ v_body``.
* Euler angles follow the aerospace ZYX (yaw-pitch-roll) sequence, so the
  yaw angle is the heading about the navigation z-axis.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "GimbalLockError",
    "skew",
    "quat_exp",
    "quat_log",
    "quat_mul",
    "quat_conj",
    "quat_normalize",
    "to_rot",
    "from_rot",
    "rot_exp",
    "yaw_of",
    "yaw_gradient",
    "right_jacobian",
    "wrap_angle",
]

_SMALL_ANGLE = 1e-8


class GimbalLockError(ValueError):
    """Raised when a yaw extraction is requested too close to +/-90 deg pitch."""


def skew(v: np.ndarray) -> np.ndarray:
    """Return the 3x3 matrix S with S @ b == np.cross(v, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize zero or non-finite quaternion")
    return q / n


def quat_exp(phi: np.ndarray) -> np.ndarray:
    """Map an axis-angle vector (rad) to a unit quaternion.

    Uses a second-order Taylor branch below 1e-8 rad so the map is smooth
    through zero rotation.
    """
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    if angle < _SMALL_ANGLE:
        # sin(a/2)/a = 1/2 - a^2/48 + O(a^4)
        half_sinc = 0.5 - angle * angle / 48.0
        q = np.array([1.0 - angle * angle / 8.0, *(half_sinc * phi)])
    else:
        half = 0.5 * angle
        q = np.array([np.cos(half), *(np.sin(half) / angle * phi)])
    return quat_normalize(q)


def quat_log(q: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_exp`; returns the axis-angle vector in (-pi, pi]."""
    w = float(q[0])
    vec = np.asarray(q[1:4], dtype=float)
    n = np.linalg.norm(vec)
    if n < _SMALL_ANGLE:
        # first-order: q ~ (1, phi/2)
        return 2.0 * vec / max(abs(w), _SMALL_ANGLE) * np.sign(w if w != 0 else 1.0)
    angle = 2.0 * np.arctan2(n, w)
    if angle > np.pi:
        angle -= 2.0 * np.pi
    return angle * vec / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a (x) b, scalar-first."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (body -> navigation)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def from_rot(R: np.ndarray) -> np.ndarray:
    """Quaternion of a rotation matrix (Shepperd's method), w >= 0."""
    t = np.trace(R)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0.0:
        q = -q
    return quat_normalize(q)


def rot_exp(phi: np.ndarray) -> np.ndarray:
    """Rotation matrix of an axis-angle vector."""
    return to_rot(quat_exp(phi))


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian J_r of SO(3): exp(phi + d) ~ exp(phi) exp(J_r(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    S = skew(phi)
    if angle < 1e-5:
        return np.eye(3) - 0.5 * S + S @ S / 6.0
    a2 = angle * angle
    return (
        np.eye(3)
        - (1.0 - np.cos(angle)) / a2 * S
        + (angle - np.sin(angle)) / (a2 * angle) * (S @ S)
    )


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a), 2.0 * np.pi)


def _check_not_gimbal(R: np.ndarray) -> float:
    denom = R[0, 0] * R[0, 0] + R[1, 0] * R[1, 0]  # cos(pitch)^2
    if denom < 1e-12:
        raise GimbalLockError("yaw undefined within 1e-6 rad of +/-90 deg pitch")
    return denom


def yaw_of(q: np.ndarray) -> float:
    """ZYX yaw angle of a unit quaternion, in (-pi, pi]."""
    R = to_rot(q)
    _check_not_gimbal(R)
    return float(np.arctan2(R[1, 0], R[0, 0]))


def yaw_gradient(q: np.ndarray) -> np.ndarray:
    """Gradient of eps -> yaw_of(q (x) quat_exp(eps)) at eps = 0.

    The perturbation eps is the body-frame multiplicative attitude error,
    matching the attitude block of the error-state covariance.
    """
    R = to_rot(q)
    denom = _check_not_gimbal(R)
    u = R[0, 0]
    w = R[1, 0]
    sk = skew(np.array([1.0, 0.0, 0.0]))
    return (w * R[0, :] - u * R[1, :]) @ sk / denom
