from enum import StrEnum
import math
from pathlib import Path
from typing import Any, Self

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from controllers import StiffHip, Thresholds, TorqueLimits
from estimate import CHANNELS, SensorModel
from integrate import StepPolicy
from lqr import Penalties
from model import BodyParams, State
from muscle import MuscleParams
from pid import PidGains


class Actuation(StrEnum):
    TORQUE = "torque"
    MUSCLE = "muscle"


class Lean(StrEnum):
    """How an initial COM offset is reached: the torso alone, or leg and torso
    together about the ankle."""

    TORSO = "torso"
    BODY = "body"


class ScenarioParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None) -> None:
        self.line = line
        self.key = key
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class Scenario(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    body: BodyParams = BodyParams()
    initial_com_offset: float | None = 0.0
    initial: State | None = None
    initial_lean: Lean = Lean.TORSO
    duration: float = 10.0
    policy: StepPolicy = StepPolicy()
    thresholds: Thresholds = Thresholds()
    penalties: Penalties = Penalties()
    stiff: StiffHip = StiffHip()
    pid: PidGains = PidGains()
    limits: TorqueLimits = TorqueLimits()
    actuation: Actuation = Actuation.TORQUE
    muscle: MuscleParams = MuscleParams()
    sensor: SensorModel = SensorModel()
    switching: bool = True
    output: str = "out/run"

    @field_validator("duration")
    @classmethod
    def validate_duration(cls, value: float) -> float:
        if not math.isfinite(value) or value <= 0:
            raise ValueError("duration must be positive.")
        return value

    @field_validator("initial_com_offset")
    @classmethod
    def validate_offset(cls, value: float | None) -> float | None:
        if value is not None and not math.isfinite(value):
            raise ValueError("initial_com_offset must be finite.")
        return value

    @model_validator(mode="after")
    def validate_scenario(self) -> Self:
        if self.initial is None and self.initial_com_offset is None:
            raise ValueError("either initial_com_offset or a full initial state is required.")
        if self.sensor.dropped_channel is not None and self.actuation != Actuation.MUSCLE:
            raise ValueError("dropped_channel needs actuation = muscle (the Kalman filter path).")
        return self


# Flat scenario-file key -> (section, field); section None is a top-level field.
KEYS: dict[str, tuple[str | None, str]] = {
    "masses.m0": ("body", "m0"),
    "masses.m1": ("body", "m1"),
    "masses.m2": ("body", "m2"),
    "lengths.l0": ("body", "l0"),
    "lengths.l1": ("body", "l1"),
    "lengths.l2": ("body", "l2"),
    "log.radius": ("body", "r"),
    "gravity": ("body", "g"),
    "initial_com_offset": (None, "initial_com_offset"),
    "initial_lean": (None, "initial_lean"),
    "initial.theta": ("initial", "theta"),
    "initial.alpha": ("initial", "alpha"),
    "initial.beta": ("initial", "beta"),
    "initial.dtheta": ("initial", "dtheta"),
    "initial.dalpha": ("initial", "dalpha"),
    "initial.dbeta": ("initial", "dbeta"),
    "duration": (None, "duration"),
    "dt_control": ("policy", "dt_control"),
    "dt_physics": ("policy", "dt_physics_nominal"),
    "dt_fine": ("policy", "dt_physics_fine"),
    "fine_trigger_com": ("policy", "fine_trigger_com"),
    "fine_trigger_rate": ("policy", "fine_trigger_rate"),
    "thresholds.com_small": ("thresholds", "com_small"),
    "thresholds.beta_case1": ("thresholds", "beta_case1"),
    "thresholds.beta_case2": ("thresholds", "beta_case2"),
    "thresholds.beta_exit3": ("thresholds", "beta_exit3"),
    "thresholds.min_dwell": ("thresholds", "min_dwell"),
    "c2_offset": ("thresholds", "c2_offset"),
    "clip_limit": ("thresholds", "clip_limit"),
    "penalties.case1": ("penalties", "case1"),
    "penalties.case2": ("penalties", "case2"),
    "penalties.case3": ("penalties", "case3"),
    "penalties.r": ("penalties", "r"),
    "stiff.kp": ("stiff", "kp"),
    "stiff.kd": ("stiff", "kd"),
    "pid.kp": ("pid", "kp"),
    "pid.ki": ("pid", "ki"),
    "pid.kd": ("pid", "kd"),
    "pid.imax": ("pid", "integral_limit"),
    "pid.umax": ("pid", "output_limit"),
    "limits.ankle": ("limits", "ankle"),
    "limits.hip": ("limits", "hip"),
    "actuation": (None, "actuation"),
    "muscle.fmax": ("muscle", "f_max"),
    "muscle.arm_hip": ("muscle", "arm_hip"),
    "muscle.arm_ankle": ("muscle", "arm_ankle"),
    "muscle.q_angle": ("muscle", "q_angle"),
    "muscle.q_rate": ("muscle", "q_rate"),
    "muscle.r": ("muscle", "r"),
    "muscle.preserve_torque": ("muscle", "preserve_torque"),
    "noise.com": ("sensor", "std_com"),
    "noise.com_rate": ("sensor", "std_com_rate"),
    "noise.angle": ("sensor", "std_angle"),
    "noise.rate": ("sensor", "std_rate"),
    "noise.process": ("sensor", "process_noise"),
    "dropped_channel": ("sensor", "dropped_channel"),
    "seed": ("sensor", "seed"),
    "switching": (None, "switching"),
    "output": (None, "output"),
}

_NONE = "none"


def parse_line(line: str, number: int) -> tuple[str, str] | None:
    """Split one `key = value` line; blank lines and `#` comments yield None."""
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    if "=" not in text:
        raise ScenarioParseError("expected 'key = value'.", line=number)
    key, value = (part.strip() for part in text.split("=", 1))
    if not key:
        raise ScenarioParseError("missing key before '='.", line=number)
    if key not in KEYS:
        raise ScenarioParseError("unknown key.", line=number, key=key)
    if not value:
        raise ScenarioParseError("missing value.", line=number, key=key)
    return key, value


def _to_python(value: str) -> Any:
    return None if value.lower() == _NONE else value


def apply_overrides(values: dict[str, str], overrides: list[str]) -> dict[str, str]:
    """Apply `key=value` overrides on top of parsed values, last one wins."""
    merged = dict(values)
    for item in overrides:
        if "=" not in item:
            raise ScenarioParseError(f"override '{item}' is not of the form key=value.")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in KEYS:
            raise ScenarioParseError("unknown key.", key=key)
        merged[key] = value
    return merged


def scenario_from_values(values: dict[str, str]) -> Scenario:
    """Build a Scenario from flat key/value strings; pydantic coerces the types."""
    nested: dict[str, Any] = {}
    for key, value in values.items():
        section, field = KEYS[key]
        if section is None:
            nested[field] = _to_python(value)
        else:
            nested.setdefault(section, {})[field] = _to_python(value)
    if "initial" in nested and "initial_com_offset" not in nested:
        nested["initial_com_offset"] = None
    return Scenario.model_validate(nested)


def read_values(path: Path | str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as f_in:
        for number, line in enumerate(f_in, start=1):
            parsed = parse_line(line, number)
            if parsed is not None:
                key, value = parsed
                values[key] = value
    return values


def read_scenario(path: Path | str, overrides: list[str] | None = None) -> Scenario:
    """Read a flat `key = value` scenario file.

    Args:
        path (Path | str): scenario file
        overrides (list[str] | None): `key=value` items applied after the file

    Raises:
        ScenarioParseError: malformed line or unknown key.
        pydantic.ValidationError: a value fails validation.

    Returns:
        Scenario: the scenario, every missing key defaulted.
    """
    return scenario_from_values(apply_overrides(read_values(path), overrides or []))


def _format(value: Any) -> str:
    if value is None:
        return _NONE
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def scenario_values(sc: Scenario) -> dict[str, str]:
    values: dict[str, str] = {}
    for key, (section, field) in KEYS.items():
        if section is None:
            value = getattr(sc, field)
        else:
            part = getattr(sc, section)
            if part is None:
                continue
            value = getattr(part, field)
        if key == "dropped_channel" and value is not None:
            value = CHANNELS[value]
        values[key] = _format(value)
    return values


def write_scenario(sc: Scenario, path: Path | str) -> None:
    """Write every key so that read_scenario(path) == sc."""
    lines = [f"{key} = {value}" for key, value in scenario_values(sc).items()]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f_out:
        f_out.write("# logbalance scenario\n")
        f_out.write("\n".join(lines) + "\n")
