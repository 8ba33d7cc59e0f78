"""Plain-text run configuration.

The document is a flat list of ``section.key = value`` lines with ``#``
comments.  Every dimensioned quantity carries an explicit unit suffix
(``6.3 MHz``, ``1.4 us``, ``16 mV``, ``114 mK``, ``3 %``); bare numbers
are rejected for those fields so a misplaced magnitude cannot slip
through silently.  Unknown keys are hard errors and all problems are
reported together, not one at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .experiment import (
    ExperimentConfig,
    PI_HALF_INIT,
    SCENARIOS,
    build_pipeline_config,
    calibrate_noise,
)
from .fxp import ConfigError
from .sigmodel import DeviceParams, thermal_population

FREQUENCY_UNITS = {"GHz": 1e9, "MHz": 1e6, "Hz": 1.0}
TIME_UNITS = {"s": 1.0, "ms": 1e-3, "us": 1e-6, "ns": 1e-9}
VOLTAGE_UNITS = {"V": 1.0, "mV": 1e-3}
TEMPERATURE_UNITS = {"K": 1.0, "mK": 1e-3}
FRACTION_UNITS = {"%": 1e-2}

_BOOL_WORDS = {"on": True, "true": True, "off": False, "false": False}


class ConfigFileError(ValueError):
    """Carries the full list of problems found in a config document."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass(frozen=True)
class _Field:
    units: dict | None = None      # unit table for dimensioned quantities
    kind: str = "quantity"         # quantity | int | bool | choice
    choices: tuple = ()


SCHEMA = {
    "device.f_q": _Field(FREQUENCY_UNITS),
    "device.f_r": _Field(FREQUENCY_UNITS),
    "device.kappa": _Field(FREQUENCY_UNITS),      # linewidth kappa / 2 pi
    "device.chi": _Field(FREQUENCY_UNITS),        # dispersive shift chi / 2 pi
    "device.f_if": _Field(FREQUENCY_UNITS),
    "device.f_s": _Field(FREQUENCY_UNITS),
    "device.t1": _Field(TIME_UNITS),
    "device.temperature": _Field(TEMPERATURE_UNITS),
    "device.amp_ss": _Field(VOLTAGE_UNITS),
    "device.noise_sigma": _Field(VOLTAGE_UNITS),
    "device.offset_i": _Field(VOLTAGE_UNITS),
    "device.offset_q": _Field(VOLTAGE_UNITS),
    "calibration.noise_overlap_target": _Field(FRACTION_UNITS),
    "pipeline.window_len": _Field(kind="int"),
    "pipeline.delay": _Field(kind="int"),
    "pipeline.scale_shift": _Field(kind="int"),
    "experiment.scenario": _Field(kind="choice", choices=SCENARIOS),
    "experiment.feedback": _Field(kind="bool"),
    "experiment.repetitions": _Field(kind="int"),
    "experiment.master_seed": _Field(kind="int"),
    "experiment.threshold": _Field(VOLTAGE_UNITS),
}

_DEVICE_SCALE = {"device.kappa": 2.0 * math.pi, "device.chi": 2.0 * math.pi}


def _split_tokens(value: str) -> list[str]:
    # "3%" and "3 %" are both accepted; other units need no such glue
    if value.endswith("%") and len(value) > 1 and not value[:-1].endswith(" "):
        return [value[:-1].strip(), "%"]
    return value.split()


def parse_document(text: str) -> dict[str, tuple[int, str]]:
    """Structural pass: line grammar, known keys, duplicates."""
    entries: dict[str, tuple[int, str]] = {}
    errors = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            errors.append(f"line {lineno}: expected 'section.key = value'")
            continue
        key, value = (part.strip() for part in body.split("=", 1))
        if key not in SCHEMA:
            errors.append(f"line {lineno}: unknown key '{key}'")
            continue
        if key in entries:
            errors.append(f"line {lineno}: duplicate key '{key}'")
            continue
        if not value:
            errors.append(f"line {lineno}: '{key}' has no value")
            continue
        entries[key] = (lineno, value)
    if errors:
        raise ConfigFileError(errors)
    return entries


def _convert(key: str, lineno: int, value: str, errors: list):
    field = SCHEMA[key]
    tokens = _split_tokens(value)
    if field.kind == "bool":
        flag = _BOOL_WORDS.get(value.lower())
        if flag is None:
            errors.append(f"line {lineno}: '{key}' expects on/off/true/false")
        return flag
    if field.kind == "choice":
        if value not in field.choices:
            errors.append(f"line {lineno}: '{key}' must be one of "
                          + "/".join(field.choices))
            return None
        return value
    if field.kind == "int":
        try:
            return int(tokens[0], 0) if len(tokens) == 1 else int(value)
        except ValueError:
            errors.append(f"line {lineno}: '{key}' expects an integer")
            return None
    # dimensioned quantity: exactly "number unit"
    names = "/".join(field.units)
    if len(tokens) != 2:
        errors.append(f"line {lineno}: '{key}' needs a unit ({names})")
        return None
    number, unit = tokens
    if unit not in field.units:
        errors.append(f"line {lineno}: '{key}' unit '{unit}' is not one of {names}")
        return None
    try:
        magnitude = float(number)
    except ValueError:
        errors.append(f"line {lineno}: '{key}' value '{number}' is not a number")
        return None
    return magnitude * field.units[unit] * _DEVICE_SCALE.get(key, 1.0)


def _build(values: dict) -> tuple[ExperimentConfig, float | None]:
    errors = []
    if "device.noise_sigma" in values and "calibration.noise_overlap_target" in values:
        errors.append("device.noise_sigma and calibration.noise_overlap_target"
                      " are mutually exclusive")

    dev_kwargs = {}
    for key in ("f_q", "f_r", "kappa", "chi", "f_if", "f_s", "t1",
                "amp_ss", "noise_sigma", "offset_i", "offset_q"):
        if f"device.{key}" in values:
            dev_kwargs[key] = values[f"device.{key}"]
    if "device.temperature" in values:
        f_q = dev_kwargs.get("f_q", DeviceParams.__dataclass_fields__["f_q"].default)
        try:
            dev_kwargs["p_therm"] = thermal_population(
                values["device.temperature"], f_q)
        except ValueError as exc:
            errors.append(f"device.temperature: {exc}")

    device = None
    try:
        device = DeviceParams(**dev_kwargs)
    except (ConfigError, ValueError) as exc:
        errors.append(str(exc))

    cfg = None
    if device is not None:
        exp_kwargs = {
            "device": device,
            "scenario": values.get("experiment.scenario", PI_HALF_INIT),
            "threshold_volts": values.get("experiment.threshold", 0.016),
        }
        if "experiment.feedback" in values:
            exp_kwargs["feedback_enabled"] = values["experiment.feedback"]
        if "experiment.repetitions" in values:
            exp_kwargs["repetitions"] = values["experiment.repetitions"]
        if "experiment.master_seed" in values:
            exp_kwargs["master_seed"] = values["experiment.master_seed"]
        pipe_keys = ("pipeline.window_len", "pipeline.delay", "pipeline.scale_shift")
        if any(k in values for k in pipe_keys):
            try:
                exp_kwargs["pipeline"] = build_pipeline_config(
                    device, exp_kwargs["threshold_volts"],
                    window_len=values.get("pipeline.window_len", 4),
                    delay=values.get("pipeline.delay", 10),
                    scale_shift=values.get("pipeline.scale_shift", 3),
                )
            except (ConfigError, ValueError) as exc:
                errors.append(str(exc))
        if not errors:
            try:
                cfg = ExperimentConfig(**exp_kwargs)
            except (ConfigError, ValueError) as exc:
                errors.append(str(exc))

    if errors:
        raise ConfigFileError(errors)
    return cfg, values.get("calibration.noise_overlap_target")


def load_text(text: str) -> tuple[ExperimentConfig, float | None]:
    """Parse a config document into a run configuration.

    Returns the configuration and the requested overlap target, or None
    when the noise level was given directly (or left at zero).
    """
    entries = parse_document(text)
    errors: list[str] = []
    values = {}
    for key, (lineno, raw) in entries.items():
        converted = _convert(key, lineno, raw, errors)
        if converted is not None:
            values[key] = converted
    if errors:
        raise ConfigFileError(errors)
    return _build(values)


def load_file(path) -> tuple[ExperimentConfig, float | None]:
    with open(path, "r", encoding="ascii") as fh:
        return load_text(fh.read())


def resolve_noise(cfg: ExperimentConfig,
                  target: float | None) -> ExperimentConfig:
    """Replace the noise level with one calibrated to the overlap target."""
    if target is None:
        return cfg
    sigma = calibrate_noise(target, cfg)
    return replace(cfg, device=replace(cfg.device, noise_sigma=sigma))
