import logging
import math
from typing import NamedTuple, Self

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.optimize import bisect


logger = logging.getLogger("logbalance")

# Bisection stops once the bracket is this narrow; COM_x changes by ~0.2 m/rad.
_BETA_XTOL = 1e-14
_HALF_PI = 0.5 * math.pi


class NoEquilibrium(ValueError):
    """No torso lean puts the center of mass above the contact point."""


class BodyParams(BaseModel):
    """Three point masses (ankle, hip, head) standing on a fixed log."""

    model_config = ConfigDict(frozen=True)

    m0: float = 7.0
    m1: float = 42.0
    m2: float = 21.0
    l0: float = 0.07
    l1: float = 0.9
    l2: float = 0.7
    r: float = 0.10
    g: float = 9.81

    @field_validator("m0", "m1", "m2", "l1", "l2", "r", "g")
    @classmethod
    def validate_positive(cls, value: float) -> float:
        if not math.isfinite(value) or value <= 0:
            raise ValueError("masses, lengths, log radius and gravity must be positive.")
        return value

    @field_validator("l0")
    @classmethod
    def validate_foot(cls, value: float) -> float:
        if not math.isfinite(value) or value < 0:
            raise ValueError("foot length l0 must be non-negative.")
        return value

    @model_validator(mode="after")
    def validate_foot_shorter_than_leg(self) -> Self:
        if self.l0 >= self.l1:
            raise ValueError("foot length l0 must be shorter than leg length l1.")
        return self

    @property
    def total_mass(self) -> float:
        return self.m0 + self.m1 + self.m2

    @property
    def masses(self) -> np.ndarray:
        return np.array([self.m0, self.m1, self.m2])


class State(BaseModel):
    """Generalized coordinates and rates: foot angle theta (from the x axis),
    leg angle alpha and torso angle beta (from the y axis)."""

    model_config = ConfigDict(frozen=True)

    theta: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    dtheta: float = 0.0
    dalpha: float = 0.0
    dbeta: float = 0.0

    @field_validator("*")
    @classmethod
    def validate_finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("state entries must be finite.")
        return value

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.theta, self.alpha, self.beta, self.dtheta, self.dalpha, self.dbeta]
        )

    @classmethod
    def from_array(cls, x: np.ndarray) -> "State":
        return cls(
            theta=float(x[0]),
            alpha=float(x[1]),
            beta=float(x[2]),
            dtheta=float(x[3]),
            dalpha=float(x[4]),
            dbeta=float(x[5]),
        )


class MassPointPositions(NamedTuple):
    x0: float
    y0: float
    x1: float
    y1: float
    x2: float
    y2: float
    com_x: float
    com_y: float


class EquilibriumPosture(BaseModel):
    """Upright posture with a flat foot, vertical leg and the torso leaning so
    that the center of mass sits above the contact point."""

    model_config = ConfigDict(frozen=True)

    beta0: float
    com_y_eq: float
    pendulum_length: float

    def state(self) -> State:
        return State(beta=self.beta0)


def contact_point(p: BodyParams, theta: float) -> tuple[float, float]:
    """Foot/log contact point with the log center at the origin."""
    return -p.r * math.sin(theta), p.r * math.cos(theta)


def point_positions(
    p: BodyParams, theta: float, alpha: float, beta: float
) -> MassPointPositions:
    st, ct = math.sin(theta), math.cos(theta)
    x0 = -p.r * st + theta * p.r * ct - p.l0 * ct
    y0 = p.r * ct + theta * p.r * st - p.l0 * st
    x1 = x0 - p.l1 * math.sin(alpha)
    y1 = y0 + p.l1 * math.cos(alpha)
    x2 = x1 - p.l2 * math.sin(beta)
    y2 = y1 + p.l2 * math.cos(beta)
    total = p.total_mass
    com_x = (x0 * p.m0 + x1 * p.m1 + x2 * p.m2) / total
    com_y = (y0 * p.m0 + y1 * p.m1 + y2 * p.m2) / total
    return MassPointPositions(x0, y0, x1, y1, x2, y2, com_x, com_y)


def positions(p: BodyParams, s: State) -> MassPointPositions:
    """Evaluate the rolling-foot kinematics of the three mass points.

    Args:
        p (BodyParams): body and log parameters
        s (State): current state (only the angles are used)

    Returns:
        MassPointPositions: ankle, hip and head coordinates plus the
            mass-weighted center of mass.
    """
    return point_positions(p, s.theta, s.alpha, s.beta)


def com_velocity(p: BodyParams, x: np.ndarray) -> float:
    """Horizontal center-of-mass velocity for a 6-vector state."""
    theta, alpha, beta, dtheta, dalpha, dbeta = x
    d = p.l0 - p.r * theta
    dx0 = d * math.sin(theta) * dtheta
    dx1 = dx0 - p.l1 * math.cos(alpha) * dalpha
    dx2 = dx1 - p.l2 * math.cos(beta) * dbeta
    return (dx0 * p.m0 + dx1 * p.m1 + dx2 * p.m2) / p.total_mass


def joint_angles(s: State) -> tuple[float, float]:
    """Return the (hip, ankle) body angles for the global angles of a state."""
    hip = math.pi - s.alpha + s.beta
    ankle = _HALF_PI + s.alpha - s.theta
    return hip, ankle


def _torso_bracket() -> tuple[float, float]:
    return -_HALF_PI + 1e-9, _HALF_PI - 1e-9


def solve_torso_lean(p: BodyParams, target_com_x: float) -> float | None:
    """Torso angle that places COM_x at `target_com_x` with theta = alpha = 0.

    Returns None when no torso lean in (-pi/2, pi/2) reaches the target.
    """

    def residual(beta: float) -> float:
        return point_positions(p, 0.0, 0.0, beta).com_x - target_com_x

    lo, hi = _torso_bracket()
    f_lo, f_hi = residual(lo), residual(hi)
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    if f_lo * f_hi > 0:
        return None
    return bisect(residual, lo, hi, xtol=_BETA_XTOL, maxiter=400)


def equilibrium_posture(p: BodyParams) -> EquilibriumPosture:
    """Find the torso lean beta0 that puts the center of mass above the contact.

    Args:
        p (BodyParams): body and log parameters

    Raises:
        NoEquilibrium: the head mass is too light to offset the foot offset l0.

    Returns:
        EquilibriumPosture: beta0, the equilibrium COM height and the rod length
            of the equivalent inverted pendulum.
    """
    beta0 = solve_torso_lean(p, 0.0)
    if beta0 is None:
        raise NoEquilibrium(
            f"l2*m2 = {p.l2 * p.m2:.4g} cannot offset the l0 moment {p.l0 * p.total_mass:.4g}."
        )
    pos = point_positions(p, 0.0, 0.0, beta0)
    _, contact_y = contact_point(p, 0.0)
    pendulum_length = pos.com_y - contact_y
    if pendulum_length <= 0:
        raise NoEquilibrium("center of mass is not above the contact point.")
    logger.debug(f"Equilibrium posture: beta0={beta0:.6f} L={pendulum_length:.4f}")
    return EquilibriumPosture(beta0=beta0, com_y_eq=pos.com_y, pendulum_length=pendulum_length)
