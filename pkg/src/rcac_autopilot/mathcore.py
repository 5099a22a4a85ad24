"""Quaternion, direction-cosine and Euler-angle primitives.

Conventions used everywhere in the package:

* Quaternions are ``[eta, ex, ey, ez]`` (scalar first) numpy arrays composed
  with the Hamilton product.
* ``q`` for an attitude is ``q_{Q/E}``: the body frame Q relative to the
  Earth frame E (NED).  ``quat_to_rotmat(q)`` returns the *passive*
  direction-cosine matrix ``O_{Q/E}`` that maps Earth-frame components to
  body-frame components, ``v_Q = O_{Q/E} v_E``.
* ``axis_rotation(k, a)`` is the single-axis passive DCM ``O_k(a)`` and
  ``O_{Q/E} = O_1(phi) O_2(theta) O_3(psi)`` for a 3-2-1 sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])
E1 = np.array([1.0, 0.0, 0.0])
E2 = np.array([0.0, 1.0, 0.0])
E3 = np.array([0.0, 0.0, 1.0])

# Largest |1 - |q|| tolerated before renormalization is considered a bug.
NORM_DRIFT_TOL = 1e-9


class QuaternionNormError(ValueError):
    pass


@dataclass(frozen=True)
class EulerAngles321:
    """Azimuth ``psi``, elevation ``theta`` and bank ``phi`` in radians."""

    psi: float
    theta: float
    phi: float


def sgn(x: float) -> float:
    """Sign with ``sgn(0) = +1``."""
    return -1.0 if x < 0.0 else 1.0


def normalize_quat(q, check: bool = False) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if check and abs(n - 1.0) > NORM_DRIFT_TOL:
        raise QuaternionNormError(f"quaternion norm drifted to {n!r}")
    return q / n


def quat_mul(p, q) -> np.ndarray:
    """Hamilton product ``p ⊗ q`` (not renormalized)."""
    p0, p1, p2, p3 = p
    q0, q1, q2, q3 = q
    return np.array([
        p0 * q0 - p1 * q1 - p2 * q2 - p3 * q3,
        p0 * q1 + p1 * q0 + p2 * q3 - p3 * q2,
        p0 * q2 - p1 * q3 + p2 * q0 + p3 * q1,
        p0 * q3 + p1 * q2 - p2 * q1 + p3 * q0,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=float)


def euler_to_quat(e: EulerAngles321) -> np.ndarray:
    """``q_{Q/E}`` for 3-2-1 Euler angles, normalized."""
    cps, sps = math.cos(e.psi / 2), math.sin(e.psi / 2)
    cth, sth = math.cos(e.theta / 2), math.sin(e.theta / 2)
    cph, sph = math.cos(e.phi / 2), math.sin(e.phi / 2)
    q = np.array([
        cph * cth * cps + sph * sth * sps,
        -cph * sth * sps + sph * cth * cps,
        cph * sth * cps + sph * cth * sps,
        cph * cth * sps - sph * sth * cps,
    ])
    return normalize_quat(q)


def quat_error(q_meas, q_sp) -> np.ndarray:
    """Attitude error ``q_meas^{-1} ⊗ q_sp``; its vector part is in the measured body frame."""
    return normalize_quat(quat_mul(quat_conj(q_meas), q_sp))


def quat_to_rotmat(q) -> np.ndarray:
    """Passive DCM ``O_{Q/E}`` of the unit quaternion ``q``."""
    w, x, y, z = q
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y + w * z), 2 * (x * z - w * y)],
        [2 * (x * y - w * z), w * w - x * x + y * y - z * z, 2 * (y * z + w * x)],
        [2 * (x * z + w * y), 2 * (y * z - w * x), w * w - x * x - y * y + z * z],
    ])


def rotmat_to_quat(R) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` (Shepperd's method), returned with ``eta >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    # Passive DCM is the transpose of the active one; use the active one below.
    A = R.T
    if tr > 0.0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (A[2, 1] - A[1, 2]) / s, (A[0, 2] - A[2, 0]) / s, (A[1, 0] - A[0, 1]) / s]
    elif A[0, 0] > A[1, 1] and A[0, 0] > A[2, 2]:
        s = 2.0 * math.sqrt(1.0 + A[0, 0] - A[1, 1] - A[2, 2])
        q = [(A[2, 1] - A[1, 2]) / s, 0.25 * s, (A[0, 1] + A[1, 0]) / s, (A[0, 2] + A[2, 0]) / s]
    elif A[1, 1] > A[2, 2]:
        s = 2.0 * math.sqrt(1.0 + A[1, 1] - A[0, 0] - A[2, 2])
        q = [(A[0, 2] - A[2, 0]) / s, (A[0, 1] + A[1, 0]) / s, 0.25 * s, (A[1, 2] + A[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + A[2, 2] - A[0, 0] - A[1, 1])
        q = [(A[1, 0] - A[0, 1]) / s, (A[0, 2] + A[2, 0]) / s, (A[1, 2] + A[2, 1]) / s, 0.25 * s]
    q = normalize_quat(q)
    return q if q[0] >= 0.0 else -q


def quat_to_euler(q) -> EulerAngles321:
    """3-2-1 angles of ``q``; uses atan2 throughout."""
    R = quat_to_rotmat(q)
    psi = math.atan2(R[0, 1], R[0, 0])
    theta = math.asin(max(-1.0, min(1.0, -R[0, 2])))
    phi = math.atan2(R[1, 2], R[2, 2])
    if psi == -math.pi:
        psi = math.pi
    if phi == -math.pi:
        phi = math.pi
    return EulerAngles321(psi, theta, phi)


def axis_rotation(axis: int, angle: float) -> np.ndarray:
    """Single-axis passive rotation ``O_axis(angle)`` for ``axis`` in {1, 2, 3}."""
    c, s = math.cos(angle), math.sin(angle)
    if axis == 1:
        return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])
    if axis == 2:
        return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
    if axis == 3:
        return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    raise ValueError(f"axis must be 1, 2 or 3, got {axis!r}")


def cross_matrix(v) -> np.ndarray:
    """Skew-symmetric ``v^x`` such that ``v^x w = v x w``."""
    x, y, z = (float(c) for c in v)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotate_body_to_earth(q, v_body) -> np.ndarray:
    """Earth-frame components of a body-frame vector."""
    return quat_to_rotmat(q).T @ np.asarray(v_body, dtype=float)


def body_z_axis(q) -> np.ndarray:
    """``k_Q`` resolved in the Earth frame."""
    return quat_to_rotmat(q)[2].copy()
