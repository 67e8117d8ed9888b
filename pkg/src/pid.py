import math
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator


class PidGains(BaseModel):
    model_config = ConfigDict(frozen=True)

    kp: float = 100.0
    ki: float = 20.0
    kd: float = 10.0
    integral_limit: float = 0.5
    output_limit: float = 200.0

    @field_validator("kp", "ki", "kd")
    @classmethod
    def validate_gain(cls, value: float) -> float:
        if not math.isfinite(value) or value < 0:
            raise ValueError("PID gains must be non-negative.")
        return value

    @field_validator("integral_limit", "output_limit")
    @classmethod
    def validate_limit(cls, value: float) -> float:
        if not math.isfinite(value) or value <= 0:
            raise ValueError("PID limits must be positive.")
        return value


class PidState(NamedTuple):
    """Only the integral persists; the derivative uses the sensed rate."""

    integral: float = 0.0


def pid_step(
    g: PidGains,
    st: PidState,
    target: float,
    measured: float,
    measured_rate: float,
    dt: float,
) -> tuple[float, PidState]:
    """Track a foot-angle target.

    The derivative acts on the measured rate so target jumps at case switches
    do not kick the output. The integral is frozen while the output is
    saturated in the direction of the error and always stays within
    +-integral_limit.

    Returns:
        tuple[float, PidState]: the clamped tracking torque and the next state.
    """
    if not dt > 0:
        raise ValueError("dt must be positive.")
    error = target - measured
    integral = float(np.clip(st.integral + error * dt, -g.integral_limit, g.integral_limit))
    unclamped = g.kp * error + g.ki * integral - g.kd * measured_rate
    saturated = abs(unclamped) > g.output_limit
    if saturated and math.copysign(1.0, unclamped) == math.copysign(1.0, error):
        integral = st.integral
        unclamped = g.kp * error + g.ki * integral - g.kd * measured_rate
    output = float(np.clip(unclamped, -g.output_limit, g.output_limit))
    return output, PidState(integral)
