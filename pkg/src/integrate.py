import logging
import math
from typing import Callable, Self

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from dynamics import ControlTorques, NonFinite, state_derivative
from model import BodyParams, point_positions


logger = logging.getLogger("logbalance")

Derivative = Callable[[np.ndarray], np.ndarray]


class StepPolicy(BaseModel):
    """Control period and the two physics sub-step sizes.

    The fine step is used while the center of mass is behind `fine_trigger_com`
    or any angular rate exceeds `fine_trigger_rate`.
    """

    model_config = ConfigDict(frozen=True)

    dt_control: float = 0.02
    dt_physics_nominal: float = 0.005
    dt_physics_fine: float = 0.001
    fine_trigger_com: float = 0.0
    fine_trigger_rate: float = 3.0

    @field_validator("dt_control", "dt_physics_nominal", "dt_physics_fine", "fine_trigger_rate")
    @classmethod
    def validate_positive(cls, value: float) -> float:
        if not math.isfinite(value) or value <= 0:
            raise ValueError("time steps and rate trigger must be positive.")
        return value

    @model_validator(mode="after")
    def validate_steps(self) -> Self:
        if not self.dt_physics_fine <= self.dt_physics_nominal <= self.dt_control:
            raise ValueError("steps must satisfy dt_fine <= dt_physics <= dt_control.")
        for step in (self.dt_physics_nominal, self.dt_physics_fine):
            ratio = self.dt_control / step
            if abs(ratio - round(ratio)) > 1e-9 * ratio:
                raise ValueError("dt_control must be an integer multiple of each physics step.")
        ratio = self.dt_physics_nominal / self.dt_physics_fine
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ValueError("dt_physics must be an integer multiple of dt_fine.")
        return self

    @property
    def fine_steps_per_period(self) -> int:
        return round(self.dt_control / self.dt_physics_fine)

    @property
    def fine_steps_per_nominal(self) -> int:
        return round(self.dt_physics_nominal / self.dt_physics_fine)


def _finite(k: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(k)):
        raise NonFinite("integration stage produced non-finite values.")
    return k


def rk4_step(deriv: Derivative, x: np.ndarray, dt: float) -> np.ndarray:
    """Classical 4th-order Runge-Kutta step; any control input is captured by
    `deriv` and therefore held constant across the step.

    Raises:
        ValueError: dt is not positive.
        NonFinite: a stage evaluated to non-finite values.
    """
    if not dt > 0:
        raise ValueError("dt must be positive.")
    k1 = _finite(deriv(x))
    k2 = _finite(deriv(x + 0.5 * dt * k1))
    k3 = _finite(deriv(x + 0.5 * dt * k2))
    k4 = _finite(deriv(x + dt * k3))
    return _finite(x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))


def needs_fine_step(p: BodyParams, x: np.ndarray, policy: StepPolicy) -> bool:
    com_x = point_positions(p, float(x[0]), float(x[1]), float(x[2])).com_x
    return com_x < policy.fine_trigger_com or bool(np.max(np.abs(x[3:])) > policy.fine_trigger_rate)


def advance_control_period(
    p: BodyParams, x: np.ndarray, u: ControlTorques, policy: StepPolicy
) -> tuple[np.ndarray, int]:
    """Integrate one control period with the torques held constant.

    Returns:
        tuple[np.ndarray, int]: state at the end of the period and the number
            of physics sub-steps taken.
    """

    def deriv(y: np.ndarray) -> np.ndarray:
        return state_derivative(p, y, u)

    total = policy.fine_steps_per_period
    nominal = policy.fine_steps_per_nominal
    done = 0
    substeps = 0
    while done < total:
        remaining = total - done
        if remaining < nominal or needs_fine_step(p, x, policy):
            ticks = 1
        else:
            ticks = nominal
        x = rk4_step(deriv, x, ticks * policy.dt_physics_fine)
        done += ticks
        substeps += 1
    logger.debug(f"Control period took {substeps} physics steps")
    return x, substeps
