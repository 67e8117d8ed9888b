from enum import StrEnum
import logging
import math
from typing import NamedTuple, Self

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from dynamics import ControlTorques, ankle_compliance, static_torques
from lqr import CaseConstants, LqrGain, Penalties, case_constants, synthesize_case_gains
from model import BodyParams, EquilibriumPosture, State, equilibrium_posture
from pid import PidGains, PidState, pid_step


logger = logging.getLogger("logbalance")


class Mode(StrEnum):
    CASE1 = "Case1"
    CASE2 = "Case2"
    CASE3 = "Case3"


# Allowed edges besides self-loops: 1->2, 2->3, 3->1, 3->2.
TRANSITIONS: frozenset[tuple[Mode, Mode]] = frozenset(
    {
        (Mode.CASE1, Mode.CASE2),
        (Mode.CASE2, Mode.CASE3),
        (Mode.CASE3, Mode.CASE1),
        (Mode.CASE3, Mode.CASE2),
    }
)


class CaseMode(NamedTuple):
    mode: Mode
    entered_at: float = 0.0


class Thresholds(BaseModel):
    model_config = ConfigDict(frozen=True)

    com_small: float = 0.04
    beta_case1: float = 0.1
    beta_case2: float = 1.0
    beta_exit3: float = 0.005
    c2_offset: float = 0.02
    clip_limit: float = math.pi / 6
    min_dwell: float = 0.02

    @field_validator("com_small", "clip_limit")
    @classmethod
    def validate_positive(cls, value: float) -> float:
        if not math.isfinite(value) or value <= 0:
            raise ValueError("com_small and clip_limit must be positive.")
        return value

    @field_validator("min_dwell")
    @classmethod
    def validate_dwell(cls, value: float) -> float:
        if not math.isfinite(value) or value < 0:
            raise ValueError("min_dwell must be non-negative.")
        return value

    @model_validator(mode="after")
    def validate_ordering(self) -> Self:
        if not 0 < self.beta_exit3 < self.beta_case1 < self.beta_case2:
            raise ValueError("thresholds must satisfy 0 < beta_exit3 < beta_case1 < beta_case2.")
        if not 0 < self.c2_offset < 0.1:
            raise ValueError("c2_offset must lie in (0, 0.1).")
        if self.clip_limit > 0.5 * math.pi:
            raise ValueError("clip_limit must not exceed pi/2.")
        return self


class StiffHip(BaseModel):
    model_config = ConfigDict(frozen=True)

    kp: float = 800.0
    kd: float = 80.0

    @field_validator("*")
    @classmethod
    def validate_gain(cls, value: float) -> float:
        if not math.isfinite(value) or value < 0:
            raise ValueError("hip stiffness gains must be non-negative.")
        return value


class TorqueLimits(BaseModel):
    model_config = ConfigDict(frozen=True)

    ankle: float = 200.0
    hip: float = 300.0

    @field_validator("*")
    @classmethod
    def validate_positive(cls, value: float) -> float:
        if not math.isfinite(value) or value <= 0:
            raise ValueError("torque limits must be positive.")
        return value


class SensedState(NamedTuple):
    """What the controller sees: angles, rates and the horizontal COM."""

    theta: float
    alpha: float
    beta: float
    dtheta: float
    dalpha: float
    dbeta: float
    com_x: float
    com_dx: float

    def posture(self) -> State:
        return State(
            theta=self.theta,
            alpha=self.alpha,
            beta=self.beta,
            dtheta=self.dtheta,
            dalpha=self.dalpha,
            dbeta=self.dbeta,
        )


class ControlDecision(NamedTuple):
    foot_target: float
    tau2: float
    mode: CaseMode


def clip_angle(angle: float, limit: float) -> float:
    return float(np.clip(angle, -limit, limit))


def contact_to_foot_angle(x_contact: float, r: float) -> float:
    """Foot angle that places the contact at x_contact, u = r sin(theta)."""
    ratio = x_contact / r
    if abs(ratio) > 1.0:
        logger.debug(f"Contact offset {x_contact:.4f} beyond log radius, asin argument clamped")
        ratio = math.copysign(1.0, ratio)
    return math.asin(ratio)


def initial_mode(th: Thresholds, com_x: float, beta_dev: float, t: float = 0.0) -> CaseMode:
    """Pick the starting mode straight from the switching conditions."""
    if abs(com_x) > th.com_small:
        return CaseMode(Mode.CASE2, t)
    if abs(beta_dev) >= th.beta_case1:
        return CaseMode(Mode.CASE3, t)
    return CaseMode(Mode.CASE1, t)


def classify(
    th: Thresholds,
    com_x: float,
    beta_dev: float,
    current: CaseMode,
    t: float | None = None,
) -> CaseMode:
    """Next mode under the switching conditions and the allowed transition graph.

    When `t` is given, a mode is held for at least `min_dwell` seconds.
    Inside the overlap band beta_exit3 < |beta_dev| < beta_case1 Case 3 is kept.
    """
    if t is not None and t - current.entered_at < th.min_dwell - 1e-12:
        return current
    entered = current.entered_at if t is None else t
    far = abs(com_x) > th.com_small
    match current.mode:
        case Mode.CASE1:
            target = Mode.CASE2 if far else Mode.CASE1
        case Mode.CASE2:
            target = Mode.CASE2 if far else Mode.CASE3
        case Mode.CASE3:
            if far:
                target = Mode.CASE2
            elif abs(beta_dev) <= th.beta_exit3:
                target = Mode.CASE1
            else:
                target = Mode.CASE3
    if target == current.mode:
        return current
    return CaseMode(target, entered)


def case1_control(
    gain: LqrGain,
    stiff: StiffHip,
    p: BodyParams,
    eq: EquilibriumPosture,
    sensed: SensedState,
    th: Thresholds,
    mode: CaseMode,
) -> ControlDecision:
    hip_dev = (sensed.beta - sensed.alpha) - eq.beta0
    hip_rate = sensed.dbeta - sensed.dalpha
    tau2 = -stiff.kp * hip_dev - stiff.kd * hip_rate
    ratio = float(gain.control(np.array([sensed.com_x, sensed.com_dx]))[0])
    target = clip_angle(contact_to_foot_angle(p.r * ratio, p.r), th.clip_limit)
    return ControlDecision(target, tau2, mode)


def case2_control(
    gain: LqrGain, th: Thresholds, sensed: SensedState, mode: CaseMode
) -> ControlDecision:
    """Aggressive hip LQR on the COM, with the foot angle following COM_x."""
    tau2 = float(gain.control(np.array([sensed.com_x, sensed.com_dx]))[0])
    if sensed.com_x > 0:
        offset = -th.c2_offset
    else:
        offset = th.c2_offset
    gamma = -math.asin(float(np.clip(sensed.com_x, -1.0, 1.0))) + offset
    return ControlDecision(clip_angle(gamma, th.clip_limit), tau2, mode)


def case3_control(
    hip_gain: LqrGain,
    ankle_gain: LqrGain,
    consts: CaseConstants,
    p: BodyParams,
    eq: EquilibriumPosture,
    sensed: SensedState,
    th: Thresholds,
    mode: CaseMode,
) -> ControlDecision:
    """Slow hip LQR on the torso with its predicted acceleration fed to the ankle planner."""
    tau2 = float(hip_gain.control(np.array([sensed.beta - eq.beta0, sensed.dbeta]))[0])
    beta_accel = consts.c3 * tau2
    ratio = float(ankle_gain.control(np.array([sensed.com_x, sensed.com_dx]))[0])
    ratio -= consts.c4 * beta_accel * consts.pendulum_length / (p.g * p.r)
    target = clip_angle(contact_to_foot_angle(p.r * ratio, p.r), th.clip_limit)
    return ControlDecision(target, tau2, mode)


class ControllerBundle(BaseModel):
    """Immutable controller configuration with synthesized gains."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    body: BodyParams
    eq: EquilibriumPosture
    consts: CaseConstants
    gains: dict[str, LqrGain]
    # Foot response to ankle torque at equilibrium, the PID's design point.
    compliance: float
    thresholds: Thresholds = Thresholds()
    stiff: StiffHip = StiffHip()
    pid: PidGains = PidGains()
    limits: TorqueLimits = TorqueLimits()
    dt: float = 0.02
    switching: bool = True


class ControllerState(NamedTuple):
    mode: CaseMode
    pid: PidState
    envelope_warned: bool = False


def build_controller(
    p: BodyParams,
    penalties: Penalties | None = None,
    thresholds: Thresholds | None = None,
    stiff: StiffHip | None = None,
    pid: PidGains | None = None,
    limits: TorqueLimits | None = None,
    dt: float = 0.02,
    switching: bool = True,
) -> ControllerBundle:
    eq = equilibrium_posture(p)
    return ControllerBundle(
        body=p,
        eq=eq,
        consts=case_constants(p, eq),
        gains=synthesize_case_gains(p, penalties, eq),
        compliance=ankle_compliance(p, eq.state()),
        thresholds=thresholds or Thresholds(),
        stiff=stiff or StiffHip(),
        pid=pid or PidGains(),
        limits=limits or TorqueLimits(),
        dt=dt,
        switching=switching,
    )


def start_controller(bundle: ControllerBundle, sensed: SensedState, t: float = 0.0) -> ControllerState:
    if bundle.switching:
        mode = initial_mode(bundle.thresholds, sensed.com_x, sensed.beta - bundle.eq.beta0, t)
    else:
        mode = CaseMode(Mode.CASE1, t)
    logger.info(f"Controller starts in {mode.mode} at t={t:.3f}")
    return ControllerState(mode, PidState())


def plan(bundle: ControllerBundle, sensed: SensedState, mode: CaseMode) -> ControlDecision:
    gains = bundle.gains
    match mode.mode:
        case Mode.CASE1:
            return case1_control(
                gains["Case1"], bundle.stiff, bundle.body, bundle.eq, sensed, bundle.thresholds, mode
            )
        case Mode.CASE2:
            return case2_control(gains["Case2Hip"], bundle.thresholds, sensed, mode)
        case Mode.CASE3:
            return case3_control(
                gains["Case3Hip"],
                gains["Case3Ankle"],
                bundle.consts,
                bundle.body,
                bundle.eq,
                sensed,
                bundle.thresholds,
                mode,
            )


def supervise(
    bundle: ControllerBundle, cstate: ControllerState, sensed: SensedState, t: float
) -> tuple[ControlTorques, ControllerState, ControlDecision]:
    """Run one control period: classify, plan, track the foot target and saturate.

    Both torques carry the static holding torques of the sensed posture on top
    of the planner and tracker outputs. The tracking torque is scaled by the
    equilibrium foot compliance over the current one, so the foot loop keeps
    its design bandwidth as the lever under the foot changes.

    Returns:
        tuple[ControlTorques, ControllerState, ControlDecision]: saturated
            torques, the state for the next period and the planner decision.
    """
    th = bundle.thresholds
    beta_dev = sensed.beta - bundle.eq.beta0
    mode = cstate.mode
    if bundle.switching:
        mode = classify(th, sensed.com_x, beta_dev, mode, t)
        if mode.mode != cstate.mode.mode:
            logger.info(f"Mode {cstate.mode.mode} -> {mode.mode} at t={t:.3f}")

    warned = cstate.envelope_warned
    if mode.mode == Mode.CASE2 and abs(beta_dev) >= th.beta_case2 and not warned:
        logger.warning(f"Torso deviation {beta_dev:.3f} rad outside the Case 2 envelope at t={t:.3f}")
        warned = True

    decision = plan(bundle, sensed, mode)
    tracking, pid_state = pid_step(
        bundle.pid, cstate.pid, decision.foot_target, sensed.theta, sensed.dtheta, bundle.dt
    )
    posture = sensed.posture()
    hold = static_torques(bundle.body, posture)
    compliance = ankle_compliance(bundle.body, posture)
    if compliance > 0:
        tracking *= bundle.compliance / compliance
    # Positive ankle torque rolls the foot toward negative theta.
    tau1 = float(np.clip(hold.tau1 - tracking, -bundle.limits.ankle, bundle.limits.ankle))
    tau2 = float(np.clip(hold.tau2 + decision.tau2, -bundle.limits.hip, bundle.limits.hip))
    return ControlTorques(tau1, tau2), ControllerState(mode, pid_state, warned), decision
