import logging
import math
from typing import NamedTuple, Self

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.linalg import expm, solve_continuous_lyapunov
from scipy.signal import place_poles

from model import BodyParams, EquilibriumPosture, equilibrium_posture


logger = logging.getLogger("logbalance")

MAX_ITERATIONS = 200
RESIDUAL_TOL = 1e-10
# Accepted once P stops changing, as long as the residual is within this bound.
STAGNATION_TOL = 1e-8
_SYM_TOL = 1e-9
# Real parts must clear this fraction of max(1, |A|) to count as stable.
HURWITZ_MARGIN = 1e-9


class NotStabilizable(ValueError):
    pass


class NoConvergence(ArithmeticError):
    pass


class LinearPlant(BaseModel):
    """Continuous-time plant xdot = A x + B u with LQR weights.

    `feedforward` is an optional extra input column (the torso acceleration
    channel of the Case-3 ankle plant) which the synthesis ignores.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    label: str
    note: str = ""
    feedforward: np.ndarray | None = None

    @field_validator("A", "B", "Q", "R", mode="before")
    @classmethod
    def validate_matrix(cls, value: object) -> np.ndarray:
        matrix = np.atleast_2d(np.asarray(value, dtype=float))
        if matrix.ndim != 2 or not np.all(np.isfinite(matrix)):
            raise ValueError("plant matrices must be finite 2-D arrays.")
        return matrix

    @field_validator("feedforward", mode="before")
    @classmethod
    def validate_feedforward(cls, value: object) -> np.ndarray | None:
        if value is None:
            return None
        return np.asarray(value, dtype=float).reshape(-1)

    @model_validator(mode="after")
    def validate_shapes(self) -> Self:
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got {self.A.shape}.")
        if self.B.shape[0] != n:
            raise ValueError(f"B must have {n} rows, got {self.B.shape}.")
        m = self.B.shape[1]
        if self.Q.shape != (n, n):
            raise ValueError(f"Q must be {n}x{n}, got {self.Q.shape}.")
        if self.R.shape != (m, m):
            raise ValueError(f"R must be {m}x{m}, got {self.R.shape}.")
        if not np.allclose(self.Q, self.Q.T, atol=_SYM_TOL) or not np.allclose(
            self.R, self.R.T, atol=_SYM_TOL
        ):
            raise ValueError("Q and R must be symmetric.")
        if np.min(np.linalg.eigvalsh(self.Q)) < -_SYM_TOL * max(1.0, float(np.max(np.abs(self.Q)))):
            raise ValueError("Q must be positive semidefinite.")
        if np.min(np.linalg.eigvalsh(self.R)) <= 0:
            raise ValueError("R must be positive definite.")
        if self.feedforward is not None and self.feedforward.shape != (n,):
            raise ValueError(f"feedforward column must have {n} entries.")
        return self

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]


class LqrGain(NamedTuple):
    label: str
    K: np.ndarray
    P: np.ndarray
    residual: float
    closed_loop_eigenvalues: np.ndarray
    iterations: int

    def control(self, x: np.ndarray) -> np.ndarray:
        """State feedback u = -K x."""
        return -self.K @ np.asarray(x, dtype=float)


class CaseConstants(NamedTuple):
    c1: float
    c3: float
    c4: float
    pendulum_length: float


class Penalties(BaseModel):
    """State weights w of the case plants, Q = w I, and the input weight r."""

    model_config = ConfigDict(frozen=True)

    case1: float = 100.0
    case2: float = 1e7
    case3: float = 100.0
    r: float = 1.0

    @field_validator("case1", "case2", "case3")
    @classmethod
    def validate_weight(cls, value: float) -> float:
        if not math.isfinite(value) or value < 0:
            raise ValueError("state penalty weights must be non-negative.")
        return value

    @field_validator("r")
    @classmethod
    def validate_input_weight(cls, value: float) -> float:
        if not math.isfinite(value) or value <= 0:
            raise ValueError("input penalty r must be positive.")
        return value


def riccati_residual(plant: LinearPlant, P: np.ndarray) -> float:
    A, B, Q, R = plant.A, plant.B, plant.Q, plant.R
    res = A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T @ P) + Q
    return float(np.linalg.norm(res, "fro"))


def is_stabilizable(A: np.ndarray, B: np.ndarray) -> bool:
    """Hautus test on every eigenvalue with a non-negative real part."""
    n = A.shape[0]
    scale = max(1.0, float(np.linalg.norm(A)), float(np.linalg.norm(B)))
    for lam in np.linalg.eigvals(A):
        if lam.real < -1e-12:
            continue
        pencil = np.hstack((A - lam * np.eye(n), B))
        if np.linalg.matrix_rank(pencil, tol=1e-10 * scale) < n:
            return False
    return True


def is_hurwitz(A: np.ndarray) -> bool:
    bound = -HURWITZ_MARGIN * max(1.0, float(np.linalg.norm(A)))
    return bool(np.all(np.linalg.eigvals(A).real < bound))


def stabilizing_seed(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """A gain K0 with A - B K0 Hurwitz, used to start Newton-Kleinman.

    Pole placement at -w, -2w for systems of at most two states, Bass's
    shifted-Lyapunov construction otherwise.
    """
    n, m = B.shape
    if is_hurwitz(A):
        return np.zeros((m, n))
    omega = 1.0 + float(np.max(np.abs(np.linalg.eigvals(A))))
    if n == 1:
        return np.linalg.pinv(B) @ (A + omega * np.eye(1))
    if n == 2:
        try:
            return place_poles(A, B, [-omega, -2.0 * omega]).gain_matrix
        except ValueError:
            logger.debug("Pole placement failed, using the shifted Lyapunov seed")
    shifted = A + omega * np.eye(n)
    Z = solve_continuous_lyapunov(shifted, 2.0 * B @ B.T)
    return B.T @ np.linalg.solve(Z, np.eye(n))


def solve_care(plant: LinearPlant) -> LqrGain:
    """Solve the continuous algebraic Riccati equation by Newton-Kleinman.

    A plant with an all-zero state penalty gets P = 0 and K = 0: no state cost
    means no reason to spend input, and the closed loop is A itself.

    Args:
        plant (LinearPlant): system and weights

    Raises:
        NotStabilizable: (A, B) fails the Hautus test, no stabilizing seed
            gain exists, or the converged gain leaves A - B K unstable.
        NoConvergence: the residual bound is not met within MAX_ITERATIONS.

    Returns:
        LqrGain: K = R^-1 B^T P together with P, the final Riccati residual and
            the closed-loop eigenvalues of A - B K.
    """
    A, B, Q, R = plant.A, plant.B, plant.Q, plant.R
    if not np.any(Q):
        if not is_hurwitz(A):
            logger.warning(f"LQR {plant.label}: zero state penalty leaves the open loop unstable")
        P = np.zeros_like(A)
        K = np.zeros((plant.n_inputs, plant.n_states))
        return LqrGain(plant.label, K, P, riccati_residual(plant, P), np.linalg.eigvals(A), 0)
    if not is_stabilizable(A, B):
        raise NotStabilizable(f"{plant.label}: (A, B) is not stabilizable.")
    K = stabilizing_seed(A, B)
    if not is_hurwitz(A - B @ K):
        raise NotStabilizable(f"{plant.label}: no stabilizing seed gain found.")

    P = np.zeros_like(A)
    residual = math.inf
    for iteration in range(1, MAX_ITERATIONS + 1):
        closed = A - B @ K
        P_next = solve_continuous_lyapunov(closed.T, -(Q + K.T @ R @ K))
        P_next = 0.5 * (P_next + P_next.T)
        K = np.linalg.solve(R, B.T @ P_next)
        residual = riccati_residual(plant, P_next)
        scale = max(1.0, float(np.linalg.norm(P_next, "fro")))
        change = float(np.linalg.norm(P_next - P, "fro"))
        P = P_next
        if residual < RESIDUAL_TOL * scale:
            break
        if change <= 1e-14 * scale and residual < STAGNATION_TOL * scale:
            break
    else:
        raise NoConvergence(
            f"{plant.label}: residual {residual:.3e} after {MAX_ITERATIONS} iterations."
        )

    if not is_hurwitz(A - B @ K):
        raise NotStabilizable(f"{plant.label}: converged gain does not stabilize A - B K.")
    eigs = np.linalg.eigvals(A - B @ K)
    logger.info(
        f"LQR {plant.label}: K={np.array2string(K, precision=5)} "
        f"residual={residual:.2e} iterations={iteration}"
    )
    return LqrGain(plant.label, K, P, residual, eigs, iteration)


def discretize(plant: LinearPlant, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization through the exponential of the augmented matrix."""
    n, m = plant.n_states, plant.n_inputs
    augmented = np.zeros((n + m, n + m))
    augmented[:n, :n] = plant.A
    augmented[:n, n:] = plant.B
    phi = expm(augmented * dt)
    return phi[:n, :n], phi[:n, n:]


def sampled_spectral_radius(plant: LinearPlant, gain: LqrGain, dt: float) -> float:
    """Largest |eigenvalue| of Ad - Bd K when the gain runs behind a hold of dt.

    Below one the sampled loop is stable.
    """
    Ad, Bd = discretize(plant, dt)
    return float(np.max(np.abs(np.linalg.eigvals(Ad - Bd @ gain.K))))


def case_constants(p: BodyParams, eq: EquilibriumPosture | None = None) -> CaseConstants:
    """Small-angle gains relating hip torque, torso acceleration and COM.

    c3 maps hip torque to torso acceleration, c4 torso acceleration to COM
    acceleration, and c1 = c3 * c4 = 1 / (l1 * M) hip torque to COM
    acceleration.
    """
    if eq is None:
        eq = equilibrium_posture(p)
    l1, l2, m0, m1, m2 = p.l1, p.l2, p.m0, p.m1, p.m2
    lever_sum = l1 * m1 + l1 * m2 + l2 * m2
    c3 = lever_sum / (l1 * l2**2 * m1 * m2)
    c4 = l2**2 * m1 * m2 / (lever_sum * (m0 + m1 + m2))
    c1 = 1.0 / (l1 * p.total_mass)
    return CaseConstants(c1, c3, c4, eq.pendulum_length)


def _pendulum_a(omega_sq: float) -> np.ndarray:
    return np.array([[0.0, 1.0], [omega_sq, 0.0]])


def build_case_plants(
    p: BodyParams,
    penalties: Penalties | None = None,
    eq: EquilibriumPosture | None = None,
) -> list[LinearPlant]:
    """Emit the Case1, Case2Hip, Case3Hip and Case3Ankle plants.

    Case 1 and the Case-3 ankle plant take the contact ratio s = sin(theta)
    as input, so the contact sits at r s and COMdd = g (COM_x + r s) / L.
    Each plant weighs both states by the same case penalty, Q = w I.
    """
    penalties = penalties or Penalties()
    if eq is None:
        eq = equilibrium_posture(p)
    consts = case_constants(p, eq)
    w = p.g / consts.pendulum_length
    r = np.array([[penalties.r]])
    eye = np.eye(2)
    pendulum = _pendulum_a(w)
    contact_b = np.array([[0.0], [w * p.r]])
    sign_note = "COMdd = g(COM_x + r s)/L, s = sin(theta)"

    return [
        LinearPlant(A=pendulum, B=contact_b, Q=penalties.case1 * eye, R=r, label="Case1", note=sign_note),
        LinearPlant(
            A=_pendulum_a(0.0),
            B=np.array([[0.0], [consts.c1]]),
            Q=penalties.case2 * eye,
            R=r,
            label="Case2Hip",
            note="COMdd = C1 tau2",
        ),
        LinearPlant(
            A=_pendulum_a(0.0),
            B=np.array([[0.0], [consts.c3]]),
            Q=penalties.case3 * eye,
            R=r,
            label="Case3Hip",
            note="betadd = C3 tau2",
        ),
        LinearPlant(
            A=pendulum,
            B=contact_b,
            Q=penalties.case3 * eye,
            R=r,
            label="Case3Ankle",
            note=sign_note + " + C4 betadd",
            feedforward=np.array([0.0, consts.c4]),
        ),
    ]


def synthesize_case_gains(
    p: BodyParams,
    penalties: Penalties | None = None,
    eq: EquilibriumPosture | None = None,
) -> dict[str, LqrGain]:
    return {plant.label: solve_care(plant) for plant in build_case_plants(p, penalties, eq)}
