"""Rigid-body quadcopter model: translational, rotational and attitude kinematics.

The Earth frame is NED, gravity is ``+g`` along ``k_E`` and the rotor thrust
acts along ``-k_Q`` (body up).  Rotors are arranged in an X:

====  ==========  ====  =====================
rotor  position    spin  yaw moment per newton
====  ==========  ====  =====================
1      front-right CCW   +torque_coeff
2      rear-left   CCW   +torque_coeff
3      front-left  CW    -torque_coeff
4      rear-right  CW    -torque_coeff
====  ==========  ====  =====================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .mathcore import E3, normalize_quat, quat_to_rotmat


class SimulationDiverged(RuntimeError):
    """Raised when the integrated state stops being finite."""


@dataclass
class VehicleParams:
    m: float = 2.0
    J: np.ndarray = field(default_factory=lambda: np.diag([0.021, 0.021, 0.036]))
    g: float = 9.81
    thrust_max: float = 4 * 9.81
    moment_max: np.ndarray = field(default_factory=lambda: np.array([2.0, 2.0, 0.5]))
    rotor_arm: float = 0.25
    rotor_torque_coeff: float = 0.06

    def __post_init__(self):
        self.J = np.asarray(self.J, dtype=float)
        self.moment_max = np.asarray(self.moment_max, dtype=float)
        if self.m <= 0:
            raise ValueError("mass must be positive")
        if not np.allclose(self.J, self.J.T) or np.linalg.eigvalsh(self.J).min() <= 0:
            raise ValueError("inertia must be symmetric positive definite")
        if self.thrust_max <= 0 or np.any(self.moment_max <= 0):
            raise ValueError("actuator limits must be positive")
        self.J_inv = np.linalg.inv(self.J)
        self.allocation = allocation_matrix(self.rotor_arm, self.rotor_torque_coeff)
        self.allocation_inv = np.linalg.inv(self.allocation)

    @property
    def hover_thrust(self) -> float:
        return self.m * self.g


@dataclass
class RigidBodyState:
    r: np.ndarray
    v: np.ndarray
    q: np.ndarray
    omega: np.ndarray

    @classmethod
    def at_rest(cls, r=(0.0, 0.0, 0.0), q=(1.0, 0.0, 0.0, 0.0)) -> "RigidBodyState":
        return cls(np.array(r, dtype=float), np.zeros(3), normalize_quat(q), np.zeros(3))

    def copy(self) -> "RigidBodyState":
        return RigidBodyState(self.r.copy(), self.v.copy(), self.q.copy(), self.omega.copy())

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.r)) and np.all(np.isfinite(self.v))
            and np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.omega))
        )


@dataclass
class ActuatorCommand:
    thrust: float
    moment: np.ndarray

    def __post_init__(self):
        self.moment = np.asarray(self.moment, dtype=float)
        if self.thrust < 0:
            raise ValueError("thrust magnitude must be nonnegative")


def allocation_matrix(arm: float, torque_coeff: float) -> np.ndarray:
    """Map rotor thrusts ``t`` to ``[T, L, M, N]`` for the X layout."""
    d = arm / math.sqrt(2.0)
    k = torque_coeff
    return np.array([
        [1.0, 1.0, 1.0, 1.0],
        [-d, d, d, -d],
        [d, -d, d, -d],
        [k, k, -k, -k],
    ])


def mixer(cmd: ActuatorCommand, params: VehicleParams):
    """Allocate thrust/moment to rotors, clamp each rotor and recompute the achieved totals.

    Returns ``(achieved_thrust, achieved_moment, rotor_thrusts)``.
    """
    wrench = np.array([cmd.thrust, cmd.moment[0], cmd.moment[1], cmd.moment[2]])
    rotors = params.allocation_inv @ wrench
    clamped = np.clip(rotors, 0.0, params.thrust_max / 4.0)
    if np.array_equal(clamped, rotors):
        return float(cmd.thrust), cmd.moment.copy(), rotors
    achieved = params.allocation @ clamped
    return float(achieved[0]), achieved[1:].copy(), clamped


def translational_deriv(state: RigidBodyState, achieved_thrust: float, params: VehicleParams) -> np.ndarray:
    """Earth-frame acceleration: gravity plus thrust along ``-k_Q``."""
    k_body = quat_to_rotmat(state.q)[2]
    return params.g * E3 - (achieved_thrust / params.m) * k_body


def rotational_deriv(state: RigidBodyState, moment, params: VehicleParams) -> np.ndarray:
    w = state.omega
    return params.J_inv @ (np.asarray(moment, dtype=float) - _cross(w, params.J @ w))


def attitude_deriv(state: RigidBodyState) -> np.ndarray:
    """``q_dot = 1/2 q ⊗ [0, omega]`` with ``omega`` in the body frame."""
    q0, q1, q2, q3 = state.q
    p, qq, r = state.omega
    return 0.5 * np.array([
        -q1 * p - q2 * qq - q3 * r,
        q0 * p + q2 * r - q3 * qq,
        q0 * qq + q3 * p - q1 * r,
        q0 * r + q1 * qq - q2 * p,
    ])


def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def _flat_deriv(x, thrust, moment, m, g, J, Jinv):
    """Derivative of the packed state ``(r, v, q, omega)`` as a 13-tuple of floats."""
    _, _, _, vx, vy, vz, q0, q1, q2, q3, p, qq, r = x
    # Third row of O_{Q/E}: body k axis in Earth components.
    kx = 2 * (q1 * q3 + q0 * q2)
    ky = 2 * (q2 * q3 - q0 * q1)
    kz = q0 * q0 - q1 * q1 - q2 * q2 + q3 * q3
    a = thrust / m
    hx = J[0][0] * p + J[0][1] * qq + J[0][2] * r
    hy = J[1][0] * p + J[1][1] * qq + J[1][2] * r
    hz = J[2][0] * p + J[2][1] * qq + J[2][2] * r
    tx = moment[0] - (qq * hz - r * hy)
    ty = moment[1] - (r * hx - p * hz)
    tz = moment[2] - (p * hy - qq * hx)
    return (
        vx, vy, vz,
        -a * kx, -a * ky, g - a * kz,
        0.5 * (-q1 * p - q2 * qq - q3 * r),
        0.5 * (q0 * p + q2 * r - q3 * qq),
        0.5 * (q0 * qq + q3 * p - q1 * r),
        0.5 * (q0 * r + q1 * qq - q2 * p),
        Jinv[0][0] * tx + Jinv[0][1] * ty + Jinv[0][2] * tz,
        Jinv[1][0] * tx + Jinv[1][1] * ty + Jinv[1][2] * tz,
        Jinv[2][0] * tx + Jinv[2][1] * ty + Jinv[2][2] * tz,
    )


def step(state: RigidBodyState, cmd: ActuatorCommand, dt: float, params: VehicleParams) -> RigidBodyState:
    """Advance one RK4 step with the mixer output held constant over ``dt``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    thrust, moment, _ = mixer(cmd, params)
    return integrate(state, thrust, moment, dt, params)


def integrate(state: RigidBodyState, thrust: float, moment, dt: float, params: VehicleParams) -> RigidBodyState:
    """Classical RK4 step for an already-mixed thrust/moment pair.

    Evaluates the same equations as :func:`translational_deriv`,
    :func:`rotational_deriv` and :func:`attitude_deriv`, unrolled on floats.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = (*state.r.tolist(), *state.v.tolist(), *state.q.tolist(), *state.omega.tolist())
    mom = [float(c) for c in moment]
    args = (float(thrust), mom, params.m, params.g, params.J.tolist(), params.J_inv.tolist())
    h = 0.5 * dt
    k1 = _flat_deriv(x, *args)
    k2 = _flat_deriv([a + h * b for a, b in zip(x, k1)], *args)
    k3 = _flat_deriv([a + h * b for a, b in zip(x, k2)], *args)
    k4 = _flat_deriv([a + dt * b for a, b in zip(x, k3)], *args)
    c = dt / 6.0
    y = [a + c * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(x, k1, k2, k3, k4)]
    if not all(math.isfinite(v) for v in y):
        raise SimulationDiverged(f"non-finite state after step from {state}")
    return RigidBodyState(np.array(y[0:3]), np.array(y[3:6]), normalize_quat(y[6:10]), np.array(y[10:13]))


def with_params(params: VehicleParams, **changes) -> VehicleParams:
    return replace(params, **changes)
