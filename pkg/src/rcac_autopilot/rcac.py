"""Retrospective cost adaptive control with a recursive least-squares update.

The control is ``u_k = phi_k theta_k``.  At the next controller step the new
error ``z_{k+1}`` is paired with the stored ``(phi_k, u_k)`` to form the
retrospective performance variable

    zhat(theta) = z + sigma * (phi_prev @ theta - u_prev)

and ``theta`` is moved to the minimizer of the accumulated cost
``sum zhat_i(theta)^2 + (theta - theta0)' P0^{-1} (theta - theta0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class CovarianceError(FloatingPointError):
    """Covariance lost positive definiteness."""


@dataclass
class RcacConfig:
    n_theta: int
    p0: float = 0.01
    sigma: np.ndarray | float = -1.0
    theta0: np.ndarray | None = None
    mask: np.ndarray | None = None
    check_pd: bool = False

    def __post_init__(self):
        if self.p0 <= 0:
            raise ValueError("p0 must be positive")
        sig = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if not np.all(np.isin(sig, (-1.0, 1.0))):
            raise ValueError("sigma entries must be +1 or -1")
        self.sigma = sig
        if self.theta0 is None:
            self.theta0 = np.zeros(self.n_theta)
        self.theta0 = np.asarray(self.theta0, dtype=float)
        if self.mask is None:
            self.mask = np.zeros(self.n_theta, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.theta0.shape != (self.n_theta,) or self.mask.shape != (self.n_theta,):
            raise ValueError("theta0 and mask must have length n_theta")


@dataclass
class RcacState:
    theta: np.ndarray
    P: np.ndarray
    phi_prev: np.ndarray | None = None
    u_prev: np.ndarray | None = None
    step_count: int = 0

    @classmethod
    def initial(cls, config: RcacConfig) -> "RcacState":
        theta = config.theta0.copy()
        theta[config.mask] = 0.0
        return cls(theta=theta, P=config.p0 * np.eye(config.n_theta))

    def copy(self) -> "RcacState":
        return RcacState(
            self.theta.copy(), self.P.copy(),
            None if self.phi_prev is None else self.phi_prev.copy(),
            None if self.u_prev is None else self.u_prev.copy(),
            self.step_count,
        )


@dataclass
class PidChannelBuffer:
    """Error history of one SISO channel: ``z_{k-1}``, ``z_{k-2}`` and ``gamma_{k-1}``.

    ``gamma_max`` (if set) clamps the accumulator symmetrically.
    """

    z_prev: float = 0.0
    z_prev2: float = 0.0
    gamma: float = 0.0
    gamma_max: float | None = None

    def push(self, z: float) -> None:
        self.z_prev2 = self.z_prev
        self.z_prev = z
        self.gamma += z
        if self.gamma_max is not None:
            self.gamma = min(max(self.gamma, -self.gamma_max), self.gamma_max)


def build_pid_regressor(buf: PidChannelBuffer, r_k: float = 0.0, include_ff: bool = True) -> np.ndarray:
    row = [buf.z_prev, buf.gamma, buf.z_prev - buf.z_prev2]
    if include_ff:
        row.append(r_k)
    return np.array(row, dtype=float)


def block_diag_rows(rows) -> np.ndarray:
    """Stack per-axis regressor rows into a block-diagonal ``l_u x l_theta`` matrix."""
    rows = [np.atleast_1d(np.asarray(r, dtype=float)) for r in rows]
    width = sum(len(r) for r in rows)
    phi = np.zeros((len(rows), width))
    col = 0
    for i, r in enumerate(rows):
        phi[i, col:col + len(r)] = r
        col += len(r)
    return phi


def control_output(phi_k, theta_k) -> np.ndarray:
    phi_k = np.atleast_2d(phi_k)
    assert phi_k.shape[1] == len(theta_k), "regressor/coefficient size mismatch"
    return phi_k @ theta_k


def retrospective_error(z_k, phi_prev, theta, u_prev, sigma):
    """``z_k + sigma (phi_prev theta - u_prev)``, elementwise over channels."""
    phi_prev = np.atleast_2d(phi_prev)
    return np.asarray(z_k, dtype=float) + np.asarray(sigma) * (phi_prev @ theta - np.asarray(u_prev, dtype=float))


def rls_update(state: RcacState, z_k, config: RcacConfig) -> RcacState:
    """Consume the error ``z_k`` against the stored regressor and control.

    Channels are processed one at a time (a rank-one update each), which is
    algebraically the batch minimizer for a multi-row regressor.  Updates the
    state in place and returns it.  No-op before a regressor has been stored.
    """
    if state.phi_prev is None:
        return state
    phi = np.atleast_2d(state.phi_prev)
    z = np.atleast_1d(np.asarray(z_k, dtype=float))
    u = np.atleast_1d(state.u_prev)
    sigma = np.broadcast_to(config.sigma, z.shape)
    theta, P = state.theta, state.P
    for i in range(phi.shape[0]):
        row = phi[i]
        if not row.any():
            continue
        Pphi = P @ row
        denom = 1.0 + row @ Pphi
        P_next = P - np.outer(Pphi, Pphi) / denom
        P_next = 0.5 * (P_next + P_next.T)
        zhat = z[i] + sigma[i] * (row @ theta - u[i])
        # Gauss-Newton step of a quadratic cost: zhat is affine in theta with slope sigma*row.
        theta = theta - sigma[i] * (P_next @ row) * zhat
        P = P_next
    theta[config.mask] = 0.0
    if config.check_pd and np.linalg.eigvalsh(P).min() <= 0.0:
        raise CovarianceError(f"covariance lost positive definiteness at step {state.step_count}")
    state.theta, state.P = theta, P
    state.step_count += 1
    return state


def emit(state: RcacState, phi_k) -> np.ndarray:
    """Compute ``u_k = phi_k theta_k`` and remember ``(phi_k, u_k)`` for the next update."""
    phi_k = np.atleast_2d(np.asarray(phi_k, dtype=float))
    u = control_output(phi_k, state.theta)
    state.phi_prev = phi_k
    state.u_prev = u
    return u


def batch_cost(theta, history, config: RcacConfig) -> float:
    """Retrospective cost of ``theta`` over ``[(z_i, phi_{i-1}, u_{i-1}), ...]``."""
    theta = np.asarray(theta, dtype=float)
    total = 0.0
    for z, phi_prev, u_prev in history:
        zhat = retrospective_error(z, phi_prev, theta, u_prev, config.sigma)
        total += float(np.sum(zhat ** 2))
    d = theta - config.theta0
    return total + float(d @ d) / config.p0


def batch_minimizer(history, config: RcacConfig) -> np.ndarray:
    """Solve the regularized normal equations of :func:`batch_cost` directly."""
    n = config.n_theta
    A = np.eye(n) / config.p0
    b = config.theta0 / config.p0
    for z, phi_prev, u_prev in history:
        phi = np.atleast_2d(phi_prev)
        z = np.atleast_1d(np.asarray(z, dtype=float))
        u = np.atleast_1d(np.asarray(u_prev, dtype=float))
        sig = np.broadcast_to(config.sigma, z.shape)
        # zhat = sig*phi theta + (z - sig*u)
        A += phi.T @ phi
        b -= phi.T @ (sig * (z - sig * u))
    return np.linalg.solve(A, b)
