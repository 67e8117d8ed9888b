import logging
import math
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from dynamics import ControlTorques, state_derivative, static_torques
from lqr import LinearPlant, LqrGain
from model import BodyParams, EquilibriumPosture


logger = logging.getLogger("logbalance")

FD_STEP = 1e-6

# Muscles 1, 2 pull across the hip; muscles 3, 4 across the ankle.
HIP_PAIR = (0, 1)
ANKLE_PAIR = (2, 3)
# Plant rows and state-penalty entries that drive each pair's compensation.
HIP_ROWS, HIP_WEIGHTS = (5, 4), (2, 1)
ANKLE_ROWS, ANKLE_WEIGHTS = (3, 4), (0, 1)


class MuscleParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    f_max: float = 800.0
    arm_hip: float = 0.05
    arm_ankle: float = 0.04
    q_angle: float = 100.0
    q_rate: float = 10.0
    r: float = 1000.0
    preserve_torque: bool = True

    @field_validator("f_max", "arm_hip", "arm_ankle", "q_angle", "q_rate", "r")
    @classmethod
    def validate_positive(cls, value: float) -> float:
        if not math.isfinite(value) or value <= 0:
            raise ValueError("muscle force, moment arms and weights must be positive.")
        return value

    def torque_map(self) -> np.ndarray:
        """(tau1, tau2) produced per unit activation of each muscle, shape (2, 4)."""
        hip = self.f_max * self.arm_hip
        ankle = self.f_max * self.arm_ankle
        return np.array([[0.0, 0.0, ankle, -ankle], [hip, -hip, 0.0, 0.0]])


class Activation(NamedTuple):
    a1: float
    a2: float
    a3: float
    a4: float

    def as_array(self) -> np.ndarray:
        return np.array(self)


def linearize(
    p: BodyParams, eq: EquilibriumPosture, h: float = FD_STEP
) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference Jacobians of the state derivative about the
    equilibrium held by its static torques.

    Returns:
        tuple[np.ndarray, np.ndarray]: A (6x6) and the torque input matrix (6x2).
    """
    x0 = eq.state().as_array()
    hold = static_torques(p, eq.state())
    u0 = np.array(hold)
    A = np.zeros((6, 6))
    for j in range(6):
        dx = np.zeros(6)
        dx[j] = h
        A[:, j] = (state_derivative(p, x0 + dx, hold) - state_derivative(p, x0 - dx, hold)) / (2 * h)
    B_tau = np.zeros((6, 2))
    for j in range(2):
        du = np.zeros(2)
        du[j] = h
        plus = state_derivative(p, x0, ControlTorques(*(u0 + du)))
        minus = state_derivative(p, x0, ControlTorques(*(u0 - du)))
        B_tau[:, j] = (plus - minus) / (2 * h)
    return A, B_tau


def muscle_plant(p: BodyParams, mp: MuscleParams, eq: EquilibriumPosture) -> LinearPlant:
    """Six-state small-angle plant driven by the four muscle activations."""
    A, B_tau = linearize(p, eq)
    B = B_tau @ mp.torque_map()
    Q = np.diag([mp.q_angle] * 3 + [mp.q_rate] * 3)
    R = mp.r * np.eye(4)
    return LinearPlant(A=A, B=B, Q=Q, R=R, label="MuscleFull", note="activations about static hold")


def compensate(
    u_pair: np.ndarray,
    q_pair: tuple[float, float],
    b: tuple[float, float, float, float],
    preserve_torque: bool = False,
) -> np.ndarray:
    """Shift a negative activation of one muscle onto its antagonist.

    `b` is (b1, b2, b3, b4), the two plant rows of the pair's input columns,
    and `q_pair` the matching diagonal state penalties. The default applies the
    plain weighted shift; `preserve_torque` flips the sign of the
    shift so the antagonist reproduces the torque the negative activation asked
    for. The result is clipped to [0, 1].
    """
    u1, u2 = float(u_pair[0]), float(u_pair[1])
    b1, b2, b3, b4 = b
    q1, q2 = q_pair
    w1 = q1 / (q1 + q2)
    w2 = q2 / (q1 + q2)
    sign = 1.0 if preserve_torque else -1.0
    onto_2 = w1 * (b1 / b2) * u1 + w2 * (b3 / b4) * u1
    onto_1 = w1 * (b2 / b1) * u2 + w2 * (b4 / b3) * u2
    if u1 >= 0 and u2 >= 0:
        out = (u1, u2)
    elif u1 < 0 <= u2:
        out = (0.0, u2 + sign * onto_2)
    elif u2 < 0 <= u1:
        out = (u1 + sign * onto_1, 0.0)
    else:
        out = (sign * onto_1, sign * onto_2)
    return np.clip(np.array(out), 0.0, 1.0)


def pair_coefficients(plant: LinearPlant, pair: tuple[int, int], rows: tuple[int, int]) -> tuple[float, float, float, float]:
    B = plant.B
    i, j = pair
    return (float(B[rows[0], i]), float(B[rows[0], j]), float(B[rows[1], i]), float(B[rows[1], j]))


def muscle_controller_step(
    gain: LqrGain, mp: MuscleParams, plant: LinearPlant, x_dev: np.ndarray
) -> Activation:
    """LQR activations for a deviation from equilibrium, made non-negative pairwise."""
    u_lqr = gain.control(x_dev)
    if np.any(u_lqr < 0):
        logger.debug(f"Compensating negative activations {np.round(u_lqr, 4)}")
    q = np.diag(plant.Q)
    a = np.zeros(4)
    for pair, rows, weights in ((HIP_PAIR, HIP_ROWS, HIP_WEIGHTS), (ANKLE_PAIR, ANKLE_ROWS, ANKLE_WEIGHTS)):
        b = pair_coefficients(plant, pair, rows)
        q_pair = (float(q[weights[0]]), float(q[weights[1]]))
        a[list(pair)] = compensate(u_lqr[list(pair)], q_pair, b, mp.preserve_torque)
    return Activation(*(float(v) for v in a))


def muscle_torques(p: BodyParams, mp: MuscleParams, eq: EquilibriumPosture, a: Activation) -> ControlTorques:
    """Joint torques from activations, as corrections around the equilibrium hold."""
    hold = np.array(static_torques(p, eq.state()))
    tau = hold + mp.torque_map() @ a.as_array()
    return ControlTorques(float(tau[0]), float(tau[1]))
