"""Waypoint missions, closed-loop experiments and tracking metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptive import LOOPS, AdaptiveAutopilot, RcacHyper
from .autopilot import AutopilotLimits, GainSet, StockAutopilot, detune
from .dynamics import RigidBodyState, SimulationDiverged, VehicleParams, integrate, mixer, ActuatorCommand
from .mathcore import quat_to_euler

log = logging.getLogger(__name__)

PHYSICS_RATE = 500
OUTER_RATE = 50
INNER_RATE = 250


@dataclass(frozen=True)
class Waypoint:
    position: tuple
    psi: float = 0.0
    acceptance_radius: float = 0.7
    hold: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(c) for c in self.position))
        if len(self.position) != 3:
            raise ValueError("waypoint position must have three components")
        if not self.acceptance_radius > 0:
            raise ValueError("acceptance radius must be positive")
        if self.hold < 0:
            raise ValueError("hold time must be nonnegative")


@dataclass
class MissionPlan:
    waypoints: list
    takeoff_altitude: float = 5.0
    # Speed at which the position setpoint slides along each leg; 0 steps
    # straight to the waypoint.
    cruise_speed: float = 2.0
    accel: float = 1.0

    def __post_init__(self):
        if not self.waypoints:
            raise ValueError("mission plan needs at least one waypoint")
        if self.waypoints[0].position[2] >= 0:
            raise ValueError("first waypoint must be above ground (negative z in NED)")

    def path_length(self, start=(0.0, 0.0, 0.0)) -> float:
        pts = [np.asarray(start, float)] + [np.asarray(w.position) for w in self.waypoints]
        return float(sum(np.linalg.norm(b - a) for a, b in zip(pts, pts[1:])))


def default_mission() -> MissionPlan:
    """Take off to 5 m, fly a 20 m x 15 m rectangle facing along each leg, return and hold."""
    h = -5.0
    wps = [
        Waypoint((0.0, 0.0, h), 0.0),
        Waypoint((20.0, 0.0, h), 0.0),
        Waypoint((20.0, 15.0, h), math.pi / 2),
        Waypoint((0.0, 15.0, h), math.pi),
        Waypoint((0.0, 0.0, h), -math.pi / 2),
        Waypoint((0.0, 0.0, h), 0.0, hold=3.0),
    ]
    return MissionPlan(wps, takeoff_altitude=5.0)


class MissionFileError(ValueError):
    pass


def parse_mission(text: str, source: str = "<mission>", **plan_kwargs) -> MissionPlan:
    """Parse ``x y z psi radius hold`` lines; ``#`` starts a comment."""
    wps = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise MissionFileError(f"{source}:{lineno}: expected 6 fields 'x y z psi radius hold', got {len(parts)}")
        try:
            x, y, z, psi, radius, hold = (float(p) for p in parts)
            wps.append(Waypoint((x, y, z), psi, radius, hold))
        except ValueError as exc:
            raise MissionFileError(f"{source}:{lineno}: {exc}") from None
    try:
        return MissionPlan(wps, takeoff_altitude=-wps[0].position[2] if wps else 0.0, **plan_kwargs)
    except ValueError as exc:
        raise MissionFileError(f"{source}: {exc}") from None


def load_mission(path, **plan_kwargs) -> MissionPlan:
    return parse_mission(Path(path).read_text(), str(path), **plan_kwargs)


def format_mission(plan: MissionPlan) -> str:
    return "".join(
        f"{w.position[0]!r} {w.position[1]!r} {w.position[2]!r} {w.psi!r} {w.acceptance_radius!r} {w.hold!r}\n"
        for w in plan.waypoints
    )


def _trapezoid(t: float, length: float, vmax: float, accel: float):
    """Distance and speed along a rest-to-rest trapezoidal profile of ``length``."""
    if length <= 0:
        return 0.0, 0.0
    t_acc = vmax / accel
    if accel * t_acc ** 2 >= length:
        t_acc = math.sqrt(length / accel)
        vmax = accel * t_acc
        t_cruise = 0.0
    else:
        t_cruise = (length - accel * t_acc ** 2) / vmax
    t_end = 2 * t_acc + t_cruise
    if t <= 0:
        return 0.0, 0.0
    if t < t_acc:
        return 0.5 * accel * t * t, accel * t
    if t < t_acc + t_cruise:
        return 0.5 * accel * t_acc ** 2 + vmax * (t - t_acc), vmax
    if t < t_end:
        tr = t_end - t
        return length - 0.5 * accel * tr * tr, accel * tr
    return length, 0.0


@dataclass
class Setpoints:
    r_sp: np.ndarray
    v_sp_ff: np.ndarray
    psi_sp: float
    psi_rate_sp_ff: float
    advanced: bool


class SetpointGenerator:
    """Feeds the cascade from a :class:`MissionPlan`.

    The position setpoint slides from the previous waypoint to the active
    one along a trapezoidal speed profile.  The active waypoint is accepted
    at the first sample inside its acceptance radius; after its hold time
    the next waypoint becomes active and the azimuth setpoint steps to it.
    Velocity feedforward is zero unless ``feedforward`` is set.
    """

    def __init__(self, plan: MissionPlan, start, feedforward: bool = False):
        self.plan = plan
        self.feedforward = feedforward
        self.index = 0
        self.seg_start = np.array(start, dtype=float)
        self.seg_t0 = 0.0
        self.arrived_at = None
        self.completed = False
        self.completion_time = None

    @property
    def active(self) -> Waypoint:
        return self.plan.waypoints[self.index]

    def _carrot(self, t):
        target = np.asarray(self.active.position)
        delta = target - self.seg_start
        length = float(np.linalg.norm(delta))
        if self.plan.cruise_speed <= 0 or length == 0.0:
            return target, np.zeros(3)
        s, v = _trapezoid(t - self.seg_t0, length, self.plan.cruise_speed, self.plan.accel)
        d = delta / length
        if s >= length:
            return target, np.zeros(3)
        return self.seg_start + s * d, v * d

    def update(self, r_meas, t: float) -> Setpoints:
        advanced = False
        if not self.completed:
            wp = self.active
            if self.arrived_at is None and np.linalg.norm(np.asarray(r_meas) - wp.position) < wp.acceptance_radius:
                self.arrived_at = t
            if self.arrived_at is not None and t - self.arrived_at >= wp.hold:
                if self.index + 1 < len(self.plan.waypoints):
                    self.seg_start = np.asarray(wp.position, dtype=float)
                    self.seg_t0 = t
                    self.index += 1
                    self.arrived_at = None
                else:
                    self.completed = True
                    self.completion_time = t
                advanced = True
        r_sp, v_ff = self._carrot(t)
        if not self.feedforward:
            v_ff = np.zeros(3)
        return Setpoints(r_sp, v_ff, self.active.psi, 0.0, advanced)


def generate_setpoints(plan: MissionPlan, gen: SetpointGenerator, state, t: float) -> Setpoints:
    return gen.update(state.r, t)


@dataclass
class ExperimentConfig:
    alpha_p: float = 1.0
    adaptive: bool = False
    loops: tuple = LOOPS
    hyper: RcacHyper = field(default_factory=RcacHyper)
    gains: GainSet = field(default_factory=GainSet)
    limits: AutopilotLimits = field(default_factory=AutopilotLimits)
    dt: float = 1.0 / PHYSICS_RATE
    duration: float = 180.0
    seed: int = 0
    jitter: float = 0.0
    feedforward: bool = False
    attitude_mode: str = "reduced"

    def __post_init__(self):
        if not self.alpha_p > 0:
            raise ValueError("alpha_p must be positive")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        self.loops = tuple(self.loops)


def _vec_cols(name, n=3, suffix="xyz"):
    return [f"{name}_{s}" for s in (suffix if n == 3 else range(n))]


LOG_COLUMNS = (
    ["t"] + _vec_cols("r") + _vec_cols("r_sp") + _vec_cols("v") + _vec_cols("v_sp")
    + _vec_cols("q", 4) + _vec_cols("q_sp", 4) + _vec_cols("omega") + _vec_cols("omega_sp")
    + _vec_cols("f_sp") + _vec_cols("moment_sp") + _vec_cols("u_r") + _vec_cols("u_v")
    + _vec_cols("u_q") + _vec_cols("u_omega") + ["thrust_achieved", "saturated"]
)
GAIN_COLUMNS = ["t"] + [f"theta_{loop}_{i}" for loop, n in (("r", 3), ("v", 9), ("q", 3), ("omega", 12)) for i in range(n)]
_COL = {c: i for i, c in enumerate(LOG_COLUMNS)}


def _slice(name, n=3):
    i = _COL[f"{name}_x"] if n == 3 else _COL[f"{name}_0"]
    return slice(i, i + n)


@dataclass
class MetricsReport:
    position_rmse: float
    azimuth_rmse: float
    max_overshoot: list
    completion_time: float | None
    completed: bool
    samples: int
    theta_final: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            f"position_rmse = {self.position_rmse!r}",
            f"azimuth_rmse = {self.azimuth_rmse!r}",
            f"max_overshoot = {','.join(repr(x) for x in self.max_overshoot)}",
            f"completion_time = {self.completion_time!r}",
            f"completed = {self.completed}",
            f"samples = {self.samples}",
        ]
        return "\n".join(lines) + "\n"


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def compute_metrics(log_rows, plan: MissionPlan, feedforward: bool = False) -> MetricsReport:
    """Tracking metrics of a log.

    Waypoint switching is replayed from the logged positions (the log is
    sampled at the mission-update rate), so the metrics depend on the log
    alone.
    """
    data = np.asarray(log_rows, dtype=float)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("log is empty")
    t = data[:, 0]
    r = data[:, _slice("r")]
    err = data[:, _slice("r_sp")] - r
    rmse = float(np.sqrt(np.mean(np.sum(err * err, axis=1))))

    psi = np.array([quat_to_euler(q).psi for q in data[:, _slice("q", 4)]])
    psi_sp = np.array([quat_to_euler(q).psi for q in data[:, _slice("q_sp", 4)]])
    az_rmse = float(np.sqrt(np.mean(_wrap(psi_sp - psi) ** 2)))

    gen = SetpointGenerator(plan, r[0], feedforward)
    active = np.empty(len(t), dtype=int)
    for k in range(len(t)):
        active[k] = gen.index
        gen.update(r[k], float(t[k]))
        if gen.completed:
            active[k + 1:] = len(plan.waypoints) - 1
            break

    overshoot = []
    starts = [r[0]] + [np.asarray(w.position) for w in plan.waypoints[:-1]]
    for j, wp in enumerate(plan.waypoints):
        target = np.asarray(wp.position)
        d = target - starts[j]
        n = np.linalg.norm(d)
        sel = (active == j) | (active == j + 1)
        if n == 0 or not sel.any():
            overshoot.append(0.0)
            continue
        past = (r[sel] - target) @ (d / n)
        overshoot.append(float(max(0.0, past.max())))

    return MetricsReport(
        position_rmse=rmse,
        azimuth_rmse=az_rmse,
        max_overshoot=overshoot,
        completion_time=gen.completion_time,
        completed=gen.completed,
        samples=len(t),
    )


@dataclass
class ExperimentResult:
    log: np.ndarray
    gains_log: np.ndarray
    metrics: MetricsReport
    abort_reason: str | None = None


def build_autopilot(config: ExperimentConfig, params: VehicleParams):
    gains = detune(config.gains, config.alpha_p)
    if config.adaptive:
        return AdaptiveAutopilot(gains, params, config.limits, config.attitude_mode,
                                 hyper=config.hyper, enabled=config.loops)
    return StockAutopilot(gains, params, config.limits, config.attitude_mode)


def _theta_row(ap) -> np.ndarray:
    if isinstance(ap, AdaptiveAutopilot):
        return np.concatenate([ap.theta(k) for k in LOOPS])
    return np.zeros(27)


def run_experiment(config: ExperimentConfig, plan: MissionPlan | None = None,
                   params: VehicleParams | None = None) -> ExperimentResult:
    """Fly ``plan`` closed loop until it completes, the duration cap, or divergence.

    Physics runs every ``config.dt``; the position/velocity loop and mission
    update every ``dt * PHYSICS_RATE / OUTER_RATE`` and attitude/rate loop
    every ``dt * PHYSICS_RATE / INNER_RATE``.  One log row is recorded per
    outer-loop update.
    """
    plan = plan or default_mission()
    params = params or VehicleParams()
    outer_every = PHYSICS_RATE // OUTER_RATE
    inner_every = PHYSICS_RATE // INNER_RATE
    dt_outer, dt_inner = config.dt * outer_every, config.dt * inner_every

    rng = np.random.default_rng(config.seed)
    start = np.zeros(3)
    if config.jitter > 0:
        start = start + rng.uniform(-config.jitter, config.jitter, 3) * np.array([1.0, 1.0, 0.0])
    state = RigidBodyState.at_rest(start)

    ap = build_autopilot(config, params)
    gen = SetpointGenerator(plan, state.r, config.feedforward)
    rows, gain_rows = [], []
    abort = None
    sp = None
    n_steps = int(round(config.duration / config.dt))

    for i in range(n_steps + 1):
        t = i * config.dt
        if i % outer_every == 0:
            sp = gen.update(state.r, t)
            ap.outer_step(state, sp.r_sp, sp.v_sp_ff, sp.psi_sp, dt_outer)
        if i % inner_every == 0:
            ap.inner_step(state, sp.psi_rate_sp_ff, dt_inner)
        cmd = ActuatorCommand(ap.thrust_cmd, ap.sp.moment_sp)
        thrust, moment, rotors = mixer(cmd, params)
        if i % outer_every == 0:
            s = ap.sp
            saturated = float(np.any(rotors <= 0.0) or np.any(rotors >= params.thrust_max / 4.0))
            rows.append(np.concatenate([
                [t], state.r, s.r_sp, state.v, s.v_sp, state.q, s.q_sp, state.omega, s.omega_sp,
                s.f_sp, s.moment_sp, ap.u["r"], ap.u["v"], ap.u["q"], ap.u["omega"],
                [thrust, saturated],
            ]))
            gain_rows.append(np.concatenate([[t], _theta_row(ap)]))
            if gen.completed or i == n_steps:
                break
        try:
            state = integrate(state, thrust, moment, config.dt, params)
        except SimulationDiverged as exc:
            abort = f"simulation diverged at t={t:.3f}s: {exc}"
            log.warning(abort)
            break

    log_arr = np.array(rows)
    metrics = compute_metrics(log_arr, plan, config.feedforward)
    if isinstance(ap, AdaptiveAutopilot):
        metrics.theta_final = {k: ap.theta(k).copy() for k in LOOPS}
    return ExperimentResult(log_arr, np.array(gain_rows), metrics, abort)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


class LogFormatError(ValueError):
    pass


def read_csv(path, columns) -> np.ndarray:
    """Read a log written by :func:`write_csv`, validating the header and every row."""
    lines = Path(path).read_text().split("\n")
    if not lines or lines[0].split(",") != list(columns):
        raise LogFormatError(f"{path}:1: header does not match the expected columns")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line == "" and lineno == len(lines):
            continue
        parts = line.split(",")
        if len(parts) != len(columns):
            raise LogFormatError(f"{path}:{lineno}: expected {len(columns)} fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise LogFormatError(f"{path}:{lineno}: non-numeric field") from None
    if not lines[-1] == "":
        raise LogFormatError(f"{path}:{len(lines)}: file does not end with a newline (truncated?)")
    if not rows:
        raise LogFormatError(f"{path}: no data rows")
    return np.array(rows)
