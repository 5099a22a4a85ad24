"""Fixed-gain cascaded multirotor autopilot.

Position P + feedforward -> velocity PID -> force-to-quaternion map ->
reduced-attitude P with azimuth-rate feedforward -> body-rate PID with rate
feedforward.  The discrete PID blocks are written in forward-shift form,

    K_P + K_I / (q - 1) + K_D (1 - 1/q),

so the integral term uses the errors *before* the current sample and the
derivative is the one-sample backward difference.  Gains absorb the sample
period.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .mathcore import (
    E3, EulerAngles321, axis_rotation, euler_to_quat, normalize_quat, quat_conj, quat_error, quat_mul,
    quat_to_rotmat, sgn,
)

log = logging.getLogger(__name__)

F2Q_MIN_FORCE = 1e-3

_VEC_GAINS = ("K_r", "K_vP", "K_vI", "K_vD", "K_q", "K_wP", "K_wI", "K_wD", "K_wff")


def _vec(*v):
    return field(default_factory=lambda: np.array(v, dtype=float))


@dataclass
class GainSet:
    """The 27 fixed gains (nine diagonal triples) plus the full-quaternion time constant."""

    K_r: np.ndarray = _vec(0.95, 0.95, 0.95)
    K_vP: np.ndarray = _vec(1.8, 1.8, 4.0)
    K_vI: np.ndarray = _vec(0.4, 0.4, 2.0)
    K_vD: np.ndarray = _vec(0.2, 0.2, 0.0)
    K_q: np.ndarray = _vec(6.5, 6.5, 2.8)
    tau: float = 0.4
    K_wP: np.ndarray = _vec(0.15, 0.15, 0.2)
    K_wI: np.ndarray = _vec(0.2, 0.2, 0.1)
    K_wD: np.ndarray = _vec(0.003, 0.003, 0.0)
    K_wff: np.ndarray = _vec(0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in _VEC_GAINS:
            arr = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            setattr(self, name, arr)
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError("tau must be positive")

    def as_vector(self) -> np.ndarray:
        """The 27 gains in declaration order (tau excluded)."""
        return np.concatenate([getattr(self, n) for n in _VEC_GAINS])

    def copy(self) -> "GainSet":
        return replace(self, **{n: getattr(self, n).copy() for n in _VEC_GAINS})


def detune(gains: GainSet, alpha_p: float) -> GainSet:
    """Scale all 27 gains by ``alpha_p``; ``tau`` is left alone."""
    if not alpha_p > 0:
        raise ValueError("alpha_p must be positive")
    return replace(gains, **{n: alpha_p * getattr(gains, n) for n in _VEC_GAINS})


def parse_gain_file(path, base: GainSet | None = None) -> GainSet:
    """Read ``key = value`` lines (``K_vP_x = 1.8``, ``tau = 0.4``); ``#`` starts a comment."""
    gains = (base or GainSet()).copy()
    axes = {"x": 0, "y": 1, "z": 2}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            value = float(val)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: bad number {val!r}") from None
        if key == "tau":
            gains.tau = value
            continue
        name, _, axis = key.rpartition("_")
        if name not in _VEC_GAINS or axis not in axes:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        getattr(gains, name)[axes[axis]] = value
    gains.__post_init__()
    return gains


def format_gain_file(gains: GainSet) -> str:
    lines = []
    for name in _VEC_GAINS:
        for ax, val in zip("xyz", getattr(gains, name)):
            lines.append(f"{name}_{ax} = {float(val)!r}")
    lines.append(f"tau = {float(gains.tau)!r}")
    return "\n".join(lines) + "\n"


@dataclass
class AutopilotLimits:
    max_speed_xy: float = 5.0
    max_speed_z: float = 2.0
    thrust_min_frac: float = 0.1
    thrust_max_frac: float = 0.9
    tilt_max: float = math.radians(35.0)
    rate_max: np.ndarray = _vec(3.8, 3.8, 1.6)
    # Symmetric clamps on the integrator states; None disables anti-windup.
    gamma_v_max: float | None = 1.0
    gamma_w_max: float | None = 1.0


@dataclass
class SetpointChain:
    r_sp: np.ndarray = _vec(0.0, 0.0, 0.0)
    v_sp_ff: np.ndarray = _vec(0.0, 0.0, 0.0)
    psi_sp: float = 0.0
    psi_rate_sp_ff: float = 0.0
    v_sp: np.ndarray = _vec(0.0, 0.0, 0.0)
    f_sp: np.ndarray = _vec(0.0, 0.0, 0.0)
    q_sp: np.ndarray = _vec(1.0, 0.0, 0.0, 0.0)
    omega_sp: np.ndarray = _vec(0.0, 0.0, 0.0)
    moment_sp: np.ndarray = _vec(0.0, 0.0, 0.0)


@dataclass
class PidState:
    """Per-axis integrator ``gamma_{k-1}`` and previous error ``z_{k-1}`` of one PID block."""

    gamma: np.ndarray = _vec(0.0, 0.0, 0.0)
    z_prev: np.ndarray = _vec(0.0, 0.0, 0.0)
    started: bool = False


@dataclass
class LoopErrors:
    z_r: np.ndarray = _vec(0.0, 0.0, 0.0)
    z_v: np.ndarray = _vec(0.0, 0.0, 0.0)
    z_q: np.ndarray = _vec(0.0, 0.0, 0.0)
    z_omega: np.ndarray = _vec(0.0, 0.0, 0.0)
    vel: PidState = field(default_factory=PidState)
    rate: PidState = field(default_factory=PidState)


def _pid(z, st: PidState, kp, ki, kd, gamma_max):
    """One forward-shift PID evaluation; advances ``st``."""
    z_prev = st.z_prev if st.started else z
    out = kp * z + ki * st.gamma + kd * (z - z_prev)
    gamma = st.gamma + z
    if gamma_max is not None:
        gamma = np.clip(gamma, -gamma_max, gamma_max)
    st.gamma, st.z_prev, st.started = gamma, np.array(z, dtype=float), True
    return out


def position_controller(r_sp, r_meas, v_sp_ff, gains: GainSet, limits: AutopilotLimits | None = None):
    v_sp = gains.K_r * (np.asarray(r_sp, float) - np.asarray(r_meas, float)) + np.asarray(v_sp_ff, float)
    return clamp_velocity(v_sp, limits) if limits is not None else v_sp


def clamp_velocity(v_sp, limits: AutopilotLimits):
    v = np.array(v_sp, dtype=float)
    h = math.hypot(v[0], v[1])
    if h > limits.max_speed_xy:
        v[:2] *= limits.max_speed_xy / h
    v[2] = min(max(v[2], -limits.max_speed_z), limits.max_speed_z)
    return v


def velocity_pid(z_v, st: PidState, gains: GainSet, limits: AutopilotLimits | None = None):
    """PID part of the velocity controller (no hover offset, no clamp)."""
    gmax = None if limits is None else limits.gamma_v_max
    return _pid(np.asarray(z_v, float), st, gains.K_vP, gains.K_vI, gains.K_vD, gmax)


def velocity_controller(v_sp, v_meas, errors: LoopErrors, gains: GainSet, dt: float,
                        mass: float, g: float, thrust_max: float,
                        limits: AutopilotLimits | None = None):
    """Force setpoint ``f_sp`` (N, Earth frame) = PID(z_v) - m g e3, clamped to the thrust envelope."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    z_v = np.asarray(v_sp, float) - np.asarray(v_meas, float)
    errors.z_v = z_v
    f = velocity_pid(z_v, errors.vel, gains, limits) - mass * g * E3
    return clamp_thrust(f, thrust_max, limits or AutopilotLimits())


def clamp_thrust(f_sp, thrust_max: float, limits: AutopilotLimits):
    """Keep the force setpoint upward, inside the tilt cone and below the thrust ceiling."""
    f = np.array(f_sp, dtype=float)
    up_min, up_max = limits.thrust_min_frac * thrust_max, limits.thrust_max_frac * thrust_max
    f[2] = -min(max(-f[2], up_min), up_max)
    h = math.hypot(f[0], f[1])
    h_max = min(-f[2] * math.tan(limits.tilt_max), math.sqrt(max(up_max ** 2 - f[2] ** 2, 0.0)))
    if h > h_max:
        f[:2] *= h_max / h
    return f


def f2q(f_sp, psi_sp: float):
    """Attitude setpoint whose thrust axis ``-k_Q`` points along ``f_sp`` with azimuth ``psi_sp``.

    Returns ``(q_sp, ok)``; ``ok`` is False when the force is too small to
    define a direction, in which case a level attitude is returned.
    """
    f = np.asarray(f_sp, dtype=float)
    n = float(np.linalg.norm(f))
    if n <= F2Q_MIN_FORCE:
        log.warning("f2q: force setpoint norm %.3g below threshold, holding level attitude", n)
        return euler_to_quat(EulerAngles321(psi_sp, 0.0, 0.0)), False
    # Body k axis points down, opposite the thrust.
    k_E = -f / n
    k_A = axis_rotation(3, psi_sp) @ k_E
    theta = math.atan2(k_A[0], k_A[2])
    k_B = axis_rotation(2, theta) @ k_A
    phi = math.atan2(-k_B[1], k_B[2])
    return euler_to_quat(EulerAngles321(psi_sp, theta, phi)), True


def reduced_attitude_error(q_meas, q_sp):
    """Smallest rotation taking the measured body k axis onto the setpoint one.

    Both the quaternion and ``z_q = sgn(eta) eps`` are expressed in the
    measured body frame.
    """
    k_sp = quat_to_rotmat(q_meas) @ quat_to_rotmat(q_sp)[2]
    k_sp = k_sp / np.linalg.norm(k_sp)
    cos_a = min(1.0, max(-1.0, float(k_sp[2])))
    alpha = math.acos(cos_a)
    # e3 x k_sp
    axis = np.array([-k_sp[1], k_sp[0], 0.0])
    an = float(np.linalg.norm(axis))
    if an < 1e-12:
        axis = np.array([1.0, 0.0, 0.0]) if cos_a < 0 else np.zeros(3)
    else:
        axis = axis / an
    q_red = normalize_quat(np.concatenate([[math.cos(alpha / 2)], math.sin(alpha / 2) * axis]))
    z_q = sgn(q_red[0]) * q_red[1:]
    return q_red, z_q


def azimuth_error(q_meas, q_sp, q_red) -> float:
    """Residual rotation about the aligned thrust axis once ``q_red`` has been applied.

    ``q_sp = q_meas ⊗ q_red ⊗ q_yaw`` with ``q_yaw`` a pure body-z rotation;
    returns ``sgn(eta_yaw) eps_yaw_z``.
    """
    q_yaw = quat_mul(quat_conj(q_red), quat_error(q_meas, q_sp))
    return sgn(q_yaw[0]) * q_yaw[3]


def attitude_error_vector(q_meas, q_sp, mode: str = "reduced"):
    """Error ``z_q`` fed to ``K_q``.

    Reduced mode: tilt part from :func:`reduced_attitude_error`, azimuth part
    from :func:`azimuth_error`.  Full mode: ``sgn(eta) eps`` of the full error.
    """
    if mode == "full":
        qe = quat_error(q_meas, q_sp)
        return sgn(qe[0]) * qe[1:]
    q_red, z_q = reduced_attitude_error(q_meas, q_sp)
    z_q = z_q.copy()
    z_q[2] = azimuth_error(q_meas, q_sp, q_red)
    return z_q


def attitude_controller(q_meas, q_sp, psi_rate_sp_ff: float, gains: GainSet, mode: str = "reduced",
                        limits: AutopilotLimits | None = None, z_q=None):
    """Body-rate setpoint from the attitude error.

    ``mode="reduced"``: ``K_q z_q + psi_rate_ff O_{Q/E} e3``.
    ``mode="full"``: ``(2 / tau) sgn(eta) eps`` of the full quaternion error.
    """
    if mode == "reduced":
        if z_q is None:
            z_q = attitude_error_vector(q_meas, q_sp)
        w = gains.K_q * z_q + psi_rate_sp_ff * quat_to_rotmat(q_meas)[:, 2]
    elif mode == "full":
        qe = quat_error(q_meas, q_sp)
        w = (2.0 / gains.tau) * sgn(qe[0]) * qe[1:]
    else:
        raise ValueError(f"unknown attitude mode {mode!r}")
    if limits is not None:
        w = np.clip(w, -limits.rate_max, limits.rate_max)
    return w


def rate_controller(omega_sp, omega_meas, errors: LoopErrors, gains: GainSet, dt: float,
                    limits: AutopilotLimits | None = None, moment_max=None):
    if dt <= 0:
        raise ValueError("dt must be positive")
    omega_sp = np.asarray(omega_sp, float)
    z_w = omega_sp - np.asarray(omega_meas, float)
    errors.z_omega = z_w
    gmax = None if limits is None else limits.gamma_w_max
    m = _pid(z_w, errors.rate, gains.K_wP, gains.K_wI, gains.K_wD, gmax) + gains.K_wff * omega_sp
    if moment_max is not None:
        m = np.clip(m, -moment_max, moment_max)
    return m


class StockAutopilot:
    """The cascade with its integrator/derivative buffers.

    ``outer_step`` runs the position and velocity controllers plus f2q;
    ``inner_step`` runs the attitude and rate controllers.  Subclasses add
    adaptive terms through the ``_adapt_*`` hooks, which return ``None`` here
    so that nothing is added at all.
    """

    def __init__(self, gains: GainSet, params, limits: AutopilotLimits | None = None,
                 attitude_mode: str = "reduced"):
        self.gains = gains
        self.params = params
        self.limits = limits or AutopilotLimits()
        self.attitude_mode = attitude_mode
        self.errors = LoopErrors()
        self.sp = SetpointChain()
        self.u = {k: np.zeros(3) for k in ("r", "v", "q", "omega")}
        self.thrust_cmd = params.hover_thrust
        self.f2q_ok = True

    def _adapt_r(self, z_r):
        return None

    def _adapt_v(self, z_v):
        return None

    def _adapt_q(self, z_q):
        return None

    def _adapt_omega(self, z_w, omega_sp):
        return None

    def outer_step(self, state, r_sp, v_sp_ff, psi_sp, dt):
        sp, g, lim, p = self.sp, self.gains, self.limits, self.params
        sp.r_sp, sp.v_sp_ff, sp.psi_sp = np.asarray(r_sp, float), np.asarray(v_sp_ff, float), psi_sp

        z_r = sp.r_sp - state.r
        self.errors.z_r = z_r
        v_sp = position_controller(sp.r_sp, state.r, sp.v_sp_ff, g)
        u_r = self._adapt_r(z_r)
        if u_r is not None:
            self.u["r"] = u_r
            v_sp = v_sp + u_r
        sp.v_sp = clamp_velocity(v_sp, lim)

        if dt <= 0:
            raise ValueError("dt must be positive")
        z_v = sp.v_sp - state.v
        self.errors.z_v = z_v
        f = velocity_pid(z_v, self.errors.vel, g, lim) - p.m * p.g * E3
        u_v = self._adapt_v(z_v)
        if u_v is not None:
            self.u["v"] = u_v
            f = f + u_v
        sp.f_sp = clamp_thrust(f, p.thrust_max, lim)
        sp.q_sp, self.f2q_ok = f2q(sp.f_sp, psi_sp)
        self.thrust_cmd = float(np.linalg.norm(sp.f_sp))

    def inner_step(self, state, psi_rate_sp_ff, dt):
        sp, g, lim = self.sp, self.gains, self.limits
        sp.psi_rate_sp_ff = psi_rate_sp_ff
        z_q = attitude_error_vector(state.q, sp.q_sp, self.attitude_mode)
        self.errors.z_q = z_q
        w = attitude_controller(state.q, sp.q_sp, psi_rate_sp_ff, g, self.attitude_mode, z_q=z_q)
        u_q = self._adapt_q(z_q)
        if u_q is not None:
            self.u["q"] = u_q
            w = w + u_q
        sp.omega_sp = np.clip(w, -lim.rate_max, lim.rate_max)

        if dt <= 0:
            raise ValueError("dt must be positive")
        z_w = sp.omega_sp - state.omega
        self.errors.z_omega = z_w
        m = _pid(z_w, self.errors.rate, g.K_wP, g.K_wI, g.K_wD, lim.gamma_w_max) + g.K_wff * sp.omega_sp
        u_w = self._adapt_omega(z_w, sp.omega_sp)
        if u_w is not None:
            self.u["omega"] = u_w
            m = m + u_w
        sp.moment_sp = np.clip(m, -self.params.moment_max, self.params.moment_max)
