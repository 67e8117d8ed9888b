import logging
import math
from typing import NamedTuple

import numpy as np

from model import BodyParams, State, contact_point, point_positions


logger = logging.getLogger("logbalance")

_CONDITION_LIMIT = 1e12
_DEGENERATE_LEVER = 1e-9


class SingularMass(ArithmeticError):
    pass


class NonFinite(ArithmeticError):
    pass


class DegenerateLever(ArithmeticError):
    pass


class GeneralizedAccel(NamedTuple):
    ddtheta: float
    ddalpha: float
    ddbeta: float


class ControlTorques(NamedTuple):
    """Ankle torque tau1 (leg on foot) and hip torque tau2 (torso on leg)."""

    tau1: float
    tau2: float


class ContactForces(NamedTuple):
    nx: float
    ny: float
    fx: float
    fy: float
    tangent_residual: float
    within_friction_cone: bool


def kinematic_terms(
    p: BodyParams, q: np.ndarray, dq: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians and velocity-product accelerations of the three mass points.

    Each point acceleration is jac[i] @ ddq + gamma[i].

    Returns:
        tuple[np.ndarray, np.ndarray]: jac with shape (3, 2, 3) and gamma
            with shape (3, 2).
    """
    theta, alpha, beta = q
    dtheta, dalpha, dbeta = dq
    st, ct = math.sin(theta), math.cos(theta)
    sa, ca = math.sin(alpha), math.cos(alpha)
    sb, cb = math.sin(beta), math.cos(beta)
    d = p.l0 - p.r * theta

    jac = np.zeros((3, 2, 3))
    jac[:, 0, 0] = d * st
    jac[:, 1, 0] = -d * ct
    jac[1:, 0, 1] = -p.l1 * ca
    jac[1:, 1, 1] = -p.l1 * sa
    jac[2, 0, 2] = -p.l2 * cb
    jac[2, 1, 2] = -p.l2 * sb

    gamma = np.zeros((3, 2))
    gamma[:, 0] = (-p.r * st + d * ct) * dtheta**2
    gamma[:, 1] = (p.r * ct + d * st) * dtheta**2
    gamma[1:, 0] += p.l1 * sa * dalpha**2
    gamma[1:, 1] -= p.l1 * ca * dalpha**2
    gamma[2, 0] += p.l2 * sb * dbeta**2
    gamma[2, 1] -= p.l2 * cb * dbeta**2
    return jac, gamma


def generalized_forces(u: ControlTorques) -> np.ndarray:
    # tau1 acts on the leg and reacts on the foot; tau2 on the torso and reacts on the leg.
    return np.array([-u.tau1, u.tau1 - u.tau2, u.tau2])


def mass_matrix(p: BodyParams, q: np.ndarray) -> np.ndarray:
    jac, _ = kinematic_terms(p, q, np.zeros(3))
    return np.einsum("i,ikj,ikl->jl", p.masses, jac, jac)


def _accel(p: BodyParams, x: np.ndarray, u: ControlTorques) -> np.ndarray:
    if not (np.all(np.isfinite(x)) and math.isfinite(u.tau1) and math.isfinite(u.tau2)):
        raise NonFinite("state or torques are not finite.")
    q, dq = x[:3], x[3:]
    jac, gamma = kinematic_terms(p, q, dq)
    m = p.masses
    mass = np.einsum("i,ikj,ikl->jl", m, jac, jac)
    cond = np.linalg.cond(mass)
    if not np.isfinite(cond) or cond > _CONDITION_LIMIT:
        raise SingularMass(f"mass matrix is singular at q={q}.")
    coriolis = np.einsum("i,ikj,ik->j", m, jac, gamma)
    gravity = p.g * np.einsum("i,ij->j", m, jac[:, 1, :])
    rhs = generalized_forces(u) - coriolis - gravity
    return np.linalg.solve(mass, rhs)


def state_derivative(p: BodyParams, x: np.ndarray, u: ControlTorques) -> np.ndarray:
    """Time derivative of the 6-vector state under constant torques."""
    return np.concatenate((x[3:], _accel(p, x, u)))


def forward_dynamics(p: BodyParams, s: State, u: ControlTorques) -> GeneralizedAccel:
    """Solve M(q) ddq = b(q, dq, tau) for the angular accelerations.

    Args:
        p (BodyParams): body and log parameters
        s (State): current state
        u (ControlTorques): ankle and hip torques

    Raises:
        NonFinite: torques are not finite.
        SingularMass: the foot lever l0 - r*theta has vanished.

    Returns:
        GeneralizedAccel: (ddtheta, ddalpha, ddbeta)
    """
    return GeneralizedAccel(*(float(v) for v in _accel(p, s.as_array(), u)))


def point_accelerations(p: BodyParams, s: State, a: GeneralizedAccel) -> np.ndarray:
    """(x, y) accelerations of the three mass points, shape (3, 2)."""
    x = s.as_array()
    jac, gamma = kinematic_terms(p, x[:3], x[3:])
    return jac @ np.asarray(a) + gamma


def moment_residuals(
    p: BodyParams, s: State, a: GeneralizedAccel, u: ControlTorques
) -> np.ndarray:
    """Residuals of the ankle, hip and whole-body moment balances.

    The ankle and hip lines are the joint torque balances; the third is
    the moment of all inertial and gravity forces about the contact point.
    """
    acc = point_accelerations(p, s, a)
    (ddx0, ddy0), (ddx1, ddy1), (ddx2, ddy2) = acc
    g = p.g
    sa, ca = math.sin(s.alpha), math.cos(s.alpha)
    sb, cb = math.sin(s.beta), math.cos(s.beta)
    ankle = (
        -ddx2 * p.m2 * (p.l2 * cb + p.l1 * ca)
        - p.m2 * (ddy2 + g) * (p.l2 * sb + p.l1 * sa)
        - ddx1 * p.l1 * p.m1 * ca
        - (ddy1 + g) * p.l1 * p.m1 * sa
    )
    hip = -ddx2 * p.l2 * p.m2 * cb - (ddy2 + g) * p.l2 * p.m2 * sb

    pos = point_positions(p, s.theta, s.alpha, s.beta)
    cx, cy = contact_point(p, s.theta)
    xs = (pos.x0, pos.x1, pos.x2)
    ys = (pos.y0, pos.y1, pos.y2)
    whole = sum(
        m * ((xi - cx) * (ay + g) - (yi - cy) * ax)
        for m, xi, yi, (ax, ay) in zip(p.masses, xs, ys, acc)
    )
    return np.array([u.tau1 - ankle, u.tau2 - hip, whole])


def static_torques(p: BodyParams, s: State) -> ControlTorques:
    """Ankle and hip torques that hold the current posture with every
    acceleration set to zero."""
    g = p.g
    sa, sb = math.sin(s.alpha), math.sin(s.beta)
    tau1 = -p.m2 * g * (p.l2 * sb + p.l1 * sa) - g * p.l1 * p.m1 * sa
    tau2 = -g * p.l2 * p.m2 * sb
    return ControlTorques(tau1, tau2)


def ankle_compliance(p: BodyParams, s: State) -> float:
    """Foot angular acceleration per unit of ankle torque rolling the foot
    toward positive theta, from the posture's mass matrix."""
    mass = mass_matrix(p, np.array([s.theta, s.alpha, s.beta]))
    response = np.linalg.solve(mass, generalized_forces(ControlTorques(-1.0, 0.0)))
    return float(response[0])


def kinetic_energy(p: BodyParams, x: np.ndarray) -> float:
    jac, _ = kinematic_terms(p, x[:3], x[3:])
    v = jac @ x[3:]
    return 0.5 * float(np.sum(p.masses * np.sum(v * v, axis=1)))


def potential_energy(p: BodyParams, x: np.ndarray) -> float:
    pos = point_positions(p, float(x[0]), float(x[1]), float(x[2]))
    return p.g * (p.m0 * pos.y0 + p.m1 * pos.y1 + p.m2 * pos.y2)


def total_energy(p: BodyParams, s: State, u: ControlTorques | None = None) -> float:
    """Kinetic plus gravitational energy of the mass points.

    With constant torques `u` the work potential -Q(u).q is included, so the
    sum is conserved under constant actuation as well.
    """
    x = s.as_array()
    energy = kinetic_energy(p, x) + potential_energy(p, x)
    if u is not None:
        energy -= float(generalized_forces(u) @ x[:3])
    return energy


def contact_forces(
    p: BodyParams,
    s: State,
    a: GeneralizedAccel,
    u: ControlTorques,
    mu: float = 1.0,
) -> ContactForces:
    """Normal and friction forces from the log on the foot.

    Raises:
        DegenerateLever: the lever arm r*theta - l0 vanishes.
    """
    lever = p.r * s.theta - p.l0
    if abs(lever) < _DEGENERATE_LEVER:
        raise DegenerateLever(f"lever arm vanishes at theta={s.theta}.")
    # The two normal components carry opposite lever signs.
    nx = u.tau1 / lever * math.sin(s.theta)
    ny = u.tau1 / -lever * math.cos(s.theta)
    acc = point_accelerations(p, s, a)
    total_x = float(p.masses @ acc[:, 0])
    total_y = float(p.masses @ (acc[:, 1] + p.g))
    fx = total_x - nx
    fy = total_y - ny
    tangent_residual = fy - fx * math.tan(s.theta)
    inside = math.hypot(fx, fy) <= mu * math.hypot(nx, ny)
    if not inside:
        logger.debug(f"Friction cone exceeded at theta={s.theta:.4f}")
    return ContactForces(nx, ny, fx, fy, tangent_residual, inside)
