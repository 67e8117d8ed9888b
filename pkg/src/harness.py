import csv
import logging
import math
from pathlib import Path
from typing import NamedTuple

from joblib import Parallel, delayed
import numpy as np
from pydantic import BaseModel
from scipy.optimize import bisect
from scipy.stats import linregress

from controllers import ControllerState, Mode, SensedState, build_controller, start_controller, supervise
from dynamics import ControlTorques, NonFinite, SingularMass, state_derivative, static_torques, total_energy
from estimate import KalmanFilter, sense
from integrate import advance_control_period, rk4_step
from lqr import solve_care
from model import (
    BodyParams,
    EquilibriumPosture,
    State,
    com_velocity,
    equilibrium_posture,
    joint_angles,
    point_positions,
    solve_torso_lean,
)
from muscle import muscle_controller_step, muscle_plant, muscle_torques
from schema import Actuation, Lean, Scenario


logger = logging.getLogger("logbalance")

SETTLE_COM = 0.005
SETTLE_BETA = 0.01
SETTLE_HOLD = 0.5
FALL_ANGLE = 0.5 * math.pi
_LEAN_MARGIN = 1e-9


class NoPosture(ValueError):
    pass


COLUMNS = (
    "t",
    "theta",
    "alpha",
    "beta",
    "dtheta",
    "dalpha",
    "dbeta",
    "com_x",
    "com_y",
    "tau1",
    "tau2",
    "foot_target",
    "mode",
    "a1",
    "a2",
    "a3",
    "a4",
    "xhat_theta",
    "xhat_alpha",
    "xhat_beta",
    "xhat_dtheta",
    "xhat_dalpha",
    "xhat_dbeta",
    "hip",
    "ankle",
)


class TrajectoryRow(NamedTuple):
    t: float
    theta: float
    alpha: float
    beta: float
    dtheta: float
    dalpha: float
    dbeta: float
    com_x: float
    com_y: float
    tau1: float | None
    tau2: float | None
    foot_target: float | None
    mode: str
    activations: tuple[float, float, float, float] | None
    x_hat: tuple[float, ...] | None
    hip: float
    ankle: float

    def cells(self) -> list[str]:
        def fmt(value: float | None) -> str:
            return "" if value is None else f"{value:.9g}"

        head = [fmt(v) for v in self[:9]]
        control = [fmt(self.tau1), fmt(self.tau2), fmt(self.foot_target), self.mode]
        acts = [fmt(v) for v in self.activations] if self.activations else [""] * 4
        est = [fmt(v) for v in self.x_hat] if self.x_hat else [""] * 6
        return [*head, *control, *acts, *est, fmt(self.hip), fmt(self.ankle)]


class TrajectoryRecord(BaseModel):
    dt: float
    beta0: float
    rows: list[TrajectoryRow] = []

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(row, name) for row in self.rows], dtype=float)

    @property
    def modes(self) -> list[str]:
        return [row.mode for row in self.rows]


class RunMetrics(BaseModel):
    converged: bool
    settle_time: float | None
    com_settle_time: float | None
    case_dwell: dict[str, float]
    mode_sequence: list[str]
    max_excursion: float
    fell: bool
    fall_time: float | None = None
    duration: float


class SweepResult(NamedTuple):
    min_stable: float | None
    max_stable: float | None
    metrics: dict[float, RunMetrics]


class MonteCarloResult(NamedTuple):
    metrics: list[RunMetrics]
    converged_fraction: float


class LinearFit(NamedTuple):
    slope: float
    intercept: float
    r_squared: float
    samples: int


def _whole_body_lean(p: BodyParams, eq: EquilibriumPosture, offset: float) -> State | None:
    def residual(phi: float) -> float:
        return point_positions(p, 0.0, phi, eq.beta0 + phi).com_x - offset

    lo = max(-FALL_ANGLE, -FALL_ANGLE - eq.beta0) + _LEAN_MARGIN
    hi = min(FALL_ANGLE, FALL_ANGLE - eq.beta0) - _LEAN_MARGIN
    if residual(lo) * residual(hi) > 0:
        return None
    phi = bisect(residual, lo, hi, xtol=1e-14, maxiter=400)
    return State(alpha=phi, beta=eq.beta0 + phi)


def init_from_com_offset(
    p: BodyParams, eq: EquilibriumPosture, offset: float, lean: Lean = Lean.TORSO
) -> State:
    """At-rest posture with theta = 0 whose COM_x equals `offset`.

    The torso lean keeps alpha = 0 and falls back to leaning leg and torso
    together about the ankle for offsets the torso alone cannot reach. The
    body lean keeps the hip at its equilibrium angle.

    Raises:
        NoPosture: neither lean reaches the offset.
    """
    if offset == 0.0:
        return eq.state()
    beta = solve_torso_lean(p, offset) if lean == Lean.TORSO else None
    if beta is not None:
        return State(beta=beta)
    state = _whole_body_lean(p, eq, offset)
    if state is None:
        raise NoPosture(f"no posture puts COM_x at {offset} m.")
    if lean == Lean.TORSO:
        logger.warning(f"Offset {offset} m needs a whole-body lean, alpha={state.alpha:.4f}")
    return state


def _fallen(x: np.ndarray) -> bool:
    return bool(np.any(np.abs(x[:3]) > FALL_ANGLE))


def _row(
    p: BodyParams,
    x: np.ndarray,
    t: float,
    u: ControlTorques | None,
    foot_target: float | None,
    mode: str,
    activations: tuple[float, float, float, float] | None = None,
    x_hat: tuple[float, ...] | None = None,
) -> TrajectoryRow:
    s = State.from_array(x)
    pos = point_positions(p, s.theta, s.alpha, s.beta)
    hip, ankle = joint_angles(s)
    return TrajectoryRow(
        t,
        s.theta,
        s.alpha,
        s.beta,
        s.dtheta,
        s.dalpha,
        s.dbeta,
        pos.com_x,
        pos.com_y,
        None if u is None else u.tau1,
        None if u is None else u.tau2,
        foot_target,
        mode,
        activations,
        x_hat,
        hip,
        ankle,
    )


def initial_state(sc: Scenario, eq: EquilibriumPosture) -> State:
    if sc.initial is not None:
        return sc.initial
    assert sc.initial_com_offset is not None
    return init_from_com_offset(sc.body, eq, sc.initial_com_offset, sc.initial_lean)


def run(sc: Scenario) -> tuple[TrajectoryRecord, RunMetrics]:
    """Simulate a scenario: sense, estimate, control, integrate and record.

    Args:
        sc (Scenario): scenario to run

    Returns:
        tuple[TrajectoryRecord, RunMetrics]: one row per control period and
            the summary metrics. A fall ends the run early and is reported in
            the metrics.
    """
    p = sc.body
    eq = equilibrium_posture(p)
    x = initial_state(sc, eq).as_array()
    policy = sc.policy
    dt = policy.dt_control
    n_steps = round(sc.duration / dt)
    rng = np.random.default_rng(sc.sensor.seed)
    x_eq = eq.state().as_array()
    record = TrajectoryRecord(dt=dt, beta0=eq.beta0)
    logger.info(f"Run start: actuation={sc.actuation} duration={sc.duration} s")

    if sc.actuation == Actuation.TORQUE:
        bundle = build_controller(
            p, sc.penalties, sc.thresholds, sc.stiff, sc.pid, sc.limits, dt, sc.switching
        )
        cstate: ControllerState | None = None
    else:
        plant = muscle_plant(p, sc.muscle, eq)
        gain = solve_care(plant)
        kf = KalmanFilter(plant, sc.sensor, dt) if sc.sensor.dropped_channel is not None else None
        a_prev = np.zeros(4)

    fell = False
    fall_time = None
    for k in range(n_steps + 1):
        t = k * dt
        com_x = point_positions(p, float(x[0]), float(x[1]), float(x[2])).com_x
        meas = sense(sc.sensor, x, com_x, com_velocity(p, x), rng)
        if sc.actuation == Actuation.TORQUE:
            channels = meas.full(x)
            sensed = SensedState(*(float(v) for v in channels), meas.com_x, meas.com_dx)
            if cstate is None:
                cstate = start_controller(bundle, sensed, t)
            u, cstate, decision = supervise(bundle, cstate, sensed, t)
            record.rows.append(_row(p, x, t, u, decision.foot_target, str(cstate.mode.mode)))
        else:
            if kf is not None:
                x_dev = kf.update(meas.z - x_eq[list(meas.observed)], a_prev)
                x_hat = tuple(float(v) for v in x_dev + x_eq)
            else:
                x_dev = meas.full(x) - x_eq
                x_hat = None
            act = muscle_controller_step(gain, sc.muscle, plant, x_dev)
            a_prev = act.as_array()
            u = muscle_torques(p, sc.muscle, eq, act)
            record.rows.append(_row(p, x, t, u, None, "", tuple(act), x_hat))
        if k == n_steps:
            break
        try:
            x, _ = advance_control_period(p, x, u, policy)
        except (NonFinite, SingularMass) as err:
            fell, fall_time = True, t + dt
            logger.warning(f"Fall at t={fall_time:.3f}: {err}")
            break
        if _fallen(x):
            fell, fall_time = True, t + dt
            logger.warning(f"Fall at t={fall_time:.3f}: angle beyond pi/2")
            record.rows.append(_row(p, x, fall_time, None, None, ""))
            break

    metrics = compute_metrics(record, sc.duration, fell, fall_time)
    logger.info(
        f"Run stop: converged={metrics.converged} fell={metrics.fell} "
        f"settle_time={metrics.settle_time}"
    )
    return record, metrics


def _settle_start(t: np.ndarray, ok: np.ndarray) -> float | None:
    if len(ok) == 0 or not ok[-1]:
        return None
    bad = np.flatnonzero(~ok)
    start = 0 if len(bad) == 0 else int(bad[-1]) + 1
    return float(t[start])


def compute_metrics(
    record: TrajectoryRecord, duration: float, fell: bool, fall_time: float | None = None
) -> RunMetrics:
    """Settle times, per-mode dwell and the mode sequence of a recorded run.

    A run converges when it did not fall and, from the settle time on,
    |COM_x| < 0.005 m and |beta - beta0| < 0.01 rad hold on every sample for at
    least SETTLE_HOLD seconds (or the whole run if shorter).
    """
    t = record.column("t")
    com = np.abs(record.column("com_x"))
    beta_dev = np.abs(record.column("beta") - record.beta0)
    settle = None if fell else _settle_start(t, (com < SETTLE_COM) & (beta_dev < SETTLE_BETA))
    com_settle = None if fell else _settle_start(t, com < SETTLE_COM)
    hold = min(SETTLE_HOLD, duration)
    converged = settle is not None and float(t[-1]) - settle >= hold - 1e-9

    dwell: dict[str, float] = {}
    sequence: list[str] = []
    for row in record.rows:
        if not row.mode:
            continue
        if not sequence or sequence[-1] != row.mode:
            sequence.append(row.mode)
    for row in record.rows[:-1]:
        if row.mode:
            dwell[row.mode] = dwell.get(row.mode, 0.0) + record.dt
    return RunMetrics(
        converged=converged,
        settle_time=settle if converged else None,
        com_settle_time=com_settle,
        case_dwell=dwell,
        mode_sequence=sequence,
        max_excursion=float(np.max(com)) if len(com) else 0.0,
        fell=fell,
        fall_time=fall_time,
        duration=duration,
    )


def case2_linear_fit(record: TrajectoryRecord) -> LinearFit:
    """Least-squares line COM_x = slope * beta + intercept over the Case 2 samples.

    Raises:
        ValueError: fewer than three Case 2 samples.
    """
    rows = [row for row in record.rows if row.mode == Mode.CASE2]
    if len(rows) < 3:
        raise ValueError(f"need at least 3 Case 2 samples, got {len(rows)}.")
    beta = np.array([row.beta for row in rows])
    com = np.array([row.com_x for row in rows])
    fit = linregress(beta, com)
    return LinearFit(float(fit.slope), float(fit.intercept), float(fit.rvalue**2), len(rows))


def run_metrics(sc: Scenario) -> RunMetrics:
    return run(sc)[1]


def _run_all(scenarios: list[Scenario], workers: int | None) -> list[RunMetrics]:
    if workers is None or workers <= 1:
        return [run_metrics(sc) for sc in scenarios]
    return list(Parallel(n_jobs=workers)(delayed(run_metrics)(sc) for sc in scenarios))


def with_offset(sc: Scenario, offset: float) -> Scenario:
    return Scenario.model_validate(
        {**sc.model_dump(), "initial_com_offset": offset, "initial": None}
    )


def sweep_stable_range(
    sc: Scenario, grid: list[float], workers: int | None = None
) -> SweepResult:
    """Run every offset of a sorted grid and find the converged interval around 0.

    Returns:
        SweepResult: bounds of the maximal contiguous run of converged grid
            points containing the point closest to 0 (None when that point
            does not converge) and the metrics per offset.
    """
    if list(grid) != sorted(grid):
        raise ValueError("grid must be sorted.")
    if not grid:
        return SweepResult(None, None, {})
    metrics = _run_all([with_offset(sc, o) for o in grid], workers)
    by_offset = dict(zip(grid, metrics))
    centre = int(np.argmin(np.abs(np.asarray(grid))))
    if not metrics[centre].converged:
        return SweepResult(None, None, by_offset)
    lo = hi = centre
    while lo > 0 and metrics[lo - 1].converged:
        lo -= 1
    while hi < len(grid) - 1 and metrics[hi + 1].converged:
        hi += 1
    logger.info(f"Stable range [{grid[lo]}, {grid[hi]}] m")
    return SweepResult(grid[lo], grid[hi], by_offset)


def monte_carlo(sc: Scenario, seeds: list[int], workers: int | None = None) -> MonteCarloResult:
    scenarios = [
        Scenario.model_validate({**sc.model_dump(), "sensor": {**sc.sensor.model_dump(), "seed": s}})
        for s in seeds
    ]
    metrics = _run_all(scenarios, workers)
    fraction = sum(m.converged for m in metrics) / len(metrics) if metrics else 0.0
    logger.info(f"Monte Carlo: {fraction:.0%} of {len(metrics)} runs converged")
    return MonteCarloResult(metrics, fraction)


class EnergyDrift(NamedTuple):
    initial: float
    final: float
    relative_drift: float
    steps: int


def perturbed_equilibrium(eq: EquilibriumPosture, size: float = 1e-4) -> State:
    return State(theta=size, alpha=-size, beta=eq.beta0 + size, dtheta=size, dalpha=-size, dbeta=size)


def energy_drift(p: BodyParams, s: State, u: ControlTorques, duration: float, dt: float) -> EnergyDrift:
    """Relative change of total_energy(p, s, u) over a fixed-step RK4 run
    under constant torques."""
    e0 = total_energy(p, s, u)
    steps = math.ceil(duration / dt - 1e-9) if duration > 0 else 0
    if steps == 0:
        return EnergyDrift(e0, e0, 0.0, 0)
    h = duration / steps
    x = s.as_array()

    def deriv(y: np.ndarray) -> np.ndarray:
        return state_derivative(p, y, u)

    for _ in range(steps):
        x = rk4_step(deriv, x, h)
    e1 = total_energy(p, State.from_array(x), u)
    return EnergyDrift(e0, e1, abs(e1 - e0) / max(abs(e0), 1e-12), steps)


def holding_energy_drift(p: BodyParams, duration: float, dt: float) -> EnergyDrift:
    eq = equilibrium_posture(p)
    hold = static_torques(p, eq.state())
    return energy_drift(p, perturbed_equilibrium(eq), hold, duration, dt)


def write_trajectory(record: TrajectoryRecord, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode="w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(COLUMNS)
        writer.writerows(row.cells() for row in record.rows)
    logger.info(f"Trajectory saved as {path}")


def write_metrics(metrics: RunMetrics, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode="w", encoding="utf-8") as f:
        f.write(metrics.model_dump_json(indent=2))
    logger.info(f"Metrics saved as {path}")
