"""Adaptive augmentation of the four cascade loops.

Each loop adds ``u = s * phi theta`` to its fixed-gain output, where ``s`` is a
fixed per-loop output scale (see ``output_scales``):

=======  =============================================  ========
loop     regressor                                       len(θ)
=======  =============================================  ========
r        diag(z_r)                                       3
v        blkdiag([z_{k-1}, γ_{k-1}, Δz]) per axis         9
q        diag(z_q)                                       3
omega    blkdiag([z_{k-1}, γ_{k-1}, Δz, ω_sp,i]) per axis 12
=======  =============================================  ========

Within one controller step the coefficients are first updated with the new
error (paired with the regressor and control stored on the previous step),
then the new control is emitted and stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autopilot import StockAutopilot
from .rcac import PidChannelBuffer, RcacConfig, RcacState, block_diag_rows, build_pid_regressor, emit, rls_update

LOOPS = ("r", "v", "q", "omega")
THETA_SIZES = {"r": 3, "v": 9, "q": 3, "omega": 12}

# Coefficient of theta_omega multiplying z_{1,omega} (roll-rate error).
DEFAULT_OMEGA_MASK_INDEX = 0


@dataclass
class RcacHyper:
    """Per-loop covariance scale and sign; defaults are the simulation-table values."""

    p0: dict = field(default_factory=lambda: {"r": 0.01, "v": 0.001, "q": 0.01, "omega": 0.001})
    sigma: dict = field(default_factory=lambda: {"r": -1.0, "v": -1.0, "q": -1.0, "omega": -1.0})
    omega_mask: tuple = (DEFAULT_OMEGA_MASK_INDEX,)
    # Per-loop output scale overrides; see output_scales for the defaults.
    scale: dict = field(default_factory=dict)

    @classmethod
    def flight(cls) -> "RcacHyper":
        h = cls()
        h.p0["omega"] = 0.0001
        return h

    def config(self, loop: str) -> RcacConfig:
        n = THETA_SIZES[loop]
        mask = np.zeros(n, dtype=bool)
        if loop == "omega":
            mask[list(self.omega_mask)] = True
        return RcacConfig(n_theta=n, p0=self.p0[loop], sigma=self.sigma[loop], mask=mask)


def parse_hyper_file(path, base: RcacHyper | None = None) -> RcacHyper:
    """Read ``p0_<loop> = value``, ``sigma_<loop> = ±1``, ``scale_<loop> = value`` and ``mask_omega = i,j`` lines."""
    h = base or RcacHyper()
    h = RcacHyper(dict(h.p0), dict(h.sigma), tuple(h.omega_mask), dict(h.scale))
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = (s.strip() for s in line.partition("="))
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        kind, _, loop = key.partition("_")
        try:
            if key == "mask_omega":
                h.omega_mask = tuple(int(s) for s in val.split(",") if s.strip())
                if any(not 0 <= i < 12 for i in h.omega_mask):
                    raise ValueError
            elif kind == "p0" and loop in LOOPS:
                h.p0[loop] = float(val)
                if h.p0[loop] <= 0:
                    raise ValueError
            elif kind == "scale" and loop in LOOPS:
                h.scale[loop] = float(val)
                if not h.scale[loop] > 0:
                    raise ValueError
            elif kind == "sigma" and loop in LOOPS:
                h.sigma[loop] = float(val)
                if h.sigma[loop] not in (1.0, -1.0):
                    raise ValueError
            else:
                raise KeyError(key)
        except KeyError:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}") from None
        except ValueError:
            raise ValueError(f"{path}:{lineno}: bad value {val!r} for {key}") from None
    return h


def output_scales(params) -> dict:
    """Physical size of one coefficient-space unit of each loop's adaptive output.

    RCAC's retrospective model treats a unit change of ``phi theta`` as
    cancelling a unit of error within one controller step.  These factors
    set how much physical command (m/s, N, rad/s, N m) one such unit is,
    i.e. the adaptive authority for the default covariance scales.
    """
    return {
        "r": 0.15,
        "v": 6.0,
        "q": 1.0,
        "omega": 0.25 * np.asarray(params.moment_max, dtype=float),
    }


class AdaptiveLoop:
    """RCAC state for one loop together with its per-axis error buffers.

    ``scale`` converts the coefficient-space control ``phi theta`` to the
    physical units of the loop output it is added to.
    """

    def __init__(self, loop: str, config: RcacConfig, scale=1.0, gamma_max: float | None = None):
        self.loop = loop
        self.config = config
        self.scale = np.asarray(scale, dtype=float)
        self.state = RcacState.initial(config)
        self.buffers = [PidChannelBuffer(gamma_max=gamma_max) for _ in range(3)]

    @property
    def theta(self) -> np.ndarray:
        return self.state.theta

    def regressor(self, z, ff=None) -> np.ndarray:
        if self.loop in ("r", "q"):
            return np.diag(np.asarray(z, dtype=float))
        if self.loop == "v":
            return block_diag_rows(build_pid_regressor(b, include_ff=False) for b in self.buffers)
        return block_diag_rows(build_pid_regressor(b, ff[i], include_ff=True) for i, b in enumerate(self.buffers))

    def step(self, z, ff=None) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        rls_update(self.state, z, self.config)
        u = emit(self.state, self.regressor(z, ff))
        for b, zi in zip(self.buffers, z):
            b.push(float(zi))
        return self.scale * u


class AdaptiveAutopilot(StockAutopilot):
    """Stock cascade plus RCAC terms on the enabled loops.

    With every loop disabled the hooks return ``None`` and the command stream
    is identical to :class:`StockAutopilot`.
    """

    def __init__(self, gains, params, limits=None, attitude_mode="reduced",
                 hyper: RcacHyper | None = None, enabled=LOOPS):
        super().__init__(gains, params, limits, attitude_mode)
        self.hyper = hyper or RcacHyper()
        self.enabled = frozenset(enabled)
        unknown = self.enabled - set(LOOPS)
        if unknown:
            raise ValueError(f"unknown loops: {sorted(unknown)}")
        scale = output_scales(params)
        scale.update(self.hyper.scale)
        gmax = {"r": None, "v": self.limits.gamma_v_max, "q": None, "omega": self.limits.gamma_w_max}
        self.loops = {k: AdaptiveLoop(k, self.hyper.config(k), scale[k], gmax[k]) for k in LOOPS}

    def theta(self, loop: str) -> np.ndarray:
        return self.loops[loop].theta

    def _adapt_r(self, z_r):
        return self.loops["r"].step(z_r) if "r" in self.enabled else None

    def _adapt_v(self, z_v):
        return self.loops["v"].step(z_v) if "v" in self.enabled else None

    def _adapt_q(self, z_q):
        return self.loops["q"].step(z_q) if "q" in self.enabled else None

    def _adapt_omega(self, z_w, omega_sp):
        return self.loops["omega"].step(z_w, omega_sp) if "omega" in self.enabled else None


def augment_position(z_r, loop: AdaptiveLoop):
    return loop.step(z_r)


def augment_velocity(z_v, loop: AdaptiveLoop):
    return loop.step(z_v)


def augment_attitude(z_q, loop: AdaptiveLoop):
    return loop.step(z_q)


def augment_rate(z_omega, omega_sp, loop: AdaptiveLoop):
    return loop.step(z_omega, omega_sp)
