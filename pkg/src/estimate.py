import logging
import math
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from lqr import LinearPlant, discretize


logger = logging.getLogger("logbalance")

CHANNELS = ("theta", "alpha", "beta", "dtheta", "dalpha", "dbeta")
_CONDITION_LIMIT = 1e12
# Prior variance of a channel nobody measures at start-up.
_UNOBSERVED_PRIOR = 1e-2


class SingularInnovation(ArithmeticError):
    pass


class SensorModel(BaseModel):
    """Gaussian sensor noise on COM, COM rate, angles and angular rates."""

    model_config = ConfigDict(frozen=True)

    std_com: float = 0.01
    std_com_rate: float = 0.005
    std_angle: float = 0.01
    std_rate: float = 0.005
    dropped_channel: int | None = None
    seed: int = 0
    process_noise: float = 1e-8

    @field_validator("std_com", "std_com_rate", "std_angle", "std_rate", "process_noise")
    @classmethod
    def validate_std(cls, value: float) -> float:
        if not math.isfinite(value) or value < 0:
            raise ValueError("noise levels must be non-negative.")
        return value

    @field_validator("dropped_channel", mode="before")
    @classmethod
    def validate_channel(cls, value: int | str | None) -> int | None:
        if value is None or value == "" or value == "none":
            return None
        if isinstance(value, str):
            if value in CHANNELS:
                return CHANNELS.index(value)
            if not value.strip().isdigit():
                raise ValueError(f"dropped_channel must be one of {', '.join(CHANNELS)} or 0..5.")
            value = int(value)
        if not 0 <= value < len(CHANNELS):
            raise ValueError("dropped_channel must lie in 0..5.")
        return value

    @property
    def observed(self) -> tuple[int, ...]:
        return tuple(i for i in range(len(CHANNELS)) if i != self.dropped_channel)

    def channel_stds(self) -> np.ndarray:
        return np.array([self.std_angle] * 3 + [self.std_rate] * 3)

    @property
    def noiseless(self) -> bool:
        return not any((self.std_com, self.std_com_rate, self.std_angle, self.std_rate))


class Measurement(NamedTuple):
    com_x: float
    com_dx: float
    z: np.ndarray
    observed: tuple[int, ...]

    def full(self, fill: np.ndarray) -> np.ndarray:
        """The six angle/rate channels with unobserved entries taken from `fill`."""
        out = np.array(fill, dtype=float)
        out[list(self.observed)] = self.z
        return out


def sense(
    model: SensorModel, x: np.ndarray, com_x: float, com_dx: float, rng: np.random.Generator
) -> Measurement:
    """Noisy reading of the true state; the dropped channel is left out.

    Eight normals are drawn every call whatever is dropped, so a seed gives the
    same noise sequence for every channel choice.
    """
    noise = rng.standard_normal(8)
    stds = model.channel_stds()
    channels = np.asarray(x, dtype=float) + stds * noise[2:]
    observed = model.observed
    return Measurement(
        com_x + model.std_com * float(noise[0]),
        com_dx + model.std_com_rate * float(noise[1]),
        channels[list(observed)],
        observed,
    )


class KalmanState(NamedTuple):
    x_hat: np.ndarray
    P_cov: np.ndarray


class DiscreteModel(NamedTuple):
    Ad: np.ndarray
    Bd: np.ndarray
    H: np.ndarray
    Qd: np.ndarray
    R: np.ndarray


def discrete_model(plant: LinearPlant, sensor: SensorModel, dt: float) -> DiscreteModel:
    Ad, Bd = discretize(plant, dt)
    observed = list(sensor.observed)
    H = np.eye(plant.n_states)[observed]
    R = np.diag(sensor.channel_stds()[observed] ** 2)
    Qd = sensor.process_noise * np.eye(plant.n_states)
    return DiscreteModel(Ad, Bd, H, Qd, R)


def initial_estimate(model: DiscreteModel, sensor: SensorModel, z: np.ndarray) -> KalmanState:
    """Start from the first reading, with the dropped channel at zero deviation."""
    n = model.Ad.shape[0]
    x_hat = model.H.T @ z
    variances = np.full(n, _UNOBSERVED_PRIOR)
    observed = list(sensor.observed)
    variances[observed] = sensor.channel_stds()[observed] ** 2
    return KalmanState(x_hat, np.diag(variances))


def kalman_step(
    model: DiscreteModel, ks: KalmanState, u: np.ndarray, z: np.ndarray
) -> KalmanState:
    """Predict across one period under input `u`, then correct with `z`.

    Raises:
        SingularInnovation: the innovation covariance cannot be inverted.
    """
    x_pred = model.Ad @ ks.x_hat + model.Bd @ np.asarray(u, dtype=float)
    P_pred = model.Ad @ ks.P_cov @ model.Ad.T + model.Qd
    P_pred = 0.5 * (P_pred + P_pred.T)

    H, R = model.H, model.R
    S = H @ P_pred @ H.T + R
    if not np.any(S):
        # Nothing uncertain: the prediction is exact.
        return KalmanState(x_pred, P_pred)
    if np.linalg.cond(S) > _CONDITION_LIMIT:
        raise SingularInnovation(f"innovation covariance is singular, cond={np.linalg.cond(S):.3e}.")
    gain = np.linalg.solve(S, H @ P_pred).T
    x_new = x_pred + gain @ (z - H @ x_pred)
    correction = np.eye(len(x_pred)) - gain @ H
    P_new = correction @ P_pred @ correction.T + gain @ R @ gain.T
    return KalmanState(x_new, 0.5 * (P_new + P_new.T))


class KalmanFilter:
    """Stateful wrapper that threads KalmanState through the run loop."""

    def __init__(self, plant: LinearPlant, sensor: SensorModel, dt: float) -> None:
        self.sensor = sensor
        self.model = discrete_model(plant, sensor, dt)
        self.state: KalmanState | None = None

    def update(self, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        if self.state is None:
            self.state = initial_estimate(self.model, self.sensor, z)
        else:
            self.state = kalman_step(self.model, self.state, u, z)
        return self.state.x_hat
