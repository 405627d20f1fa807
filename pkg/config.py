# config.py - Flat key = value experiment configuration
"""
Experiment Configuration

Parses the flat configuration format used for convergence runs:

    # desk-scale run
    time_step = 5e-5
    flow_rates = 0.2, -0.1, -0.1
    schemes = em, se_b

Blank lines and '#' comments are ignored; unknown keys, duplicates and
malformed values raise ConfigError with the file and line.

Key Functions:
- load_config(): file -> ExperimentConfig
- parse_config(): text -> ExperimentConfig
- apply_overrides(): command-line overrides on top of a loaded config
- config_echo(): ExperimentConfig -> text (round trips through parse_config)
"""

import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

from harness import ExperimentConfig

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration, anchored to a file and line when known"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        self.detail = message
        if path is not None and line is not None:
            message = f"{path}:{line}: {message}"
        elif path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got '{text}'")


def _parse_int(text: str) -> int:
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"expected an integer, got '{text}'")
    return int(value)


def _parse_rates(text: str) -> Tuple[float, float, float]:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise ValueError(f"expected 3 flow rates, got {len(parts)}")
    return tuple(float(p) for p in parts)


def _parse_schemes(text: str) -> Tuple[str, ...]:
    names = tuple(p.strip() for p in text.split(",") if p.strip())
    if not names:
        raise ValueError("expected at least one scheme")
    return names


def _fmt_float(value: float) -> str:
    return repr(float(value))


# config key -> (ExperimentConfig field, parser, formatter)
CONFIG_KEYS: Dict[str, Tuple[str, Callable[[str], Any], Callable[[Any], str]]] = {
    "time_step": ("dt_base", float, _fmt_float),
    "simulation_time": ("sim_time", float, _fmt_float),
    "number_of_particles": ("n_particles", _parse_int, str),
    "simulation_box_side_length": ("box_length", float, _fmt_float),
    "friction_coefficient": ("gamma", float, _fmt_float),
    "inverse_temperature": ("beta", float, _fmt_float),
    "flow_rates": ("flow_rates", _parse_rates, lambda v: ", ".join(_fmt_float(x) for x in v)),
    "equilibration_time": ("eq_time", float, _fmt_float),
    "runs": ("runs", _parse_int, str),
    "ladder_levels": ("ladder_levels", _parse_int, str),
    "schemes": ("schemes", _parse_schemes, lambda v: ", ".join(v)),
    "seed": ("seed", _parse_int, str),
    "checkpoint_stride": ("checkpoint_stride", _parse_int, str),
    "soile_b_variant": ("soile_b_variant", str, str),
    "mid_step_wrap_time": ("mid_wrap_at", str, str),
    "use_cell_list": ("use_cells", _parse_bool, lambda v: "true" if v else "false"),
}

DEFAULTS = ExperimentConfig()


def parse_config(text: str, path: Optional[str] = None, validate: bool = True) -> ExperimentConfig:
    """
    Parse configuration text on top of the desk-scale defaults.

    Args:
        text: file contents
        path: file name used in error messages
        validate: run ExperimentConfig.validate() on the result

    Returns:
        ExperimentConfig

    Raises:
        ConfigError: with the offending line
    """
    values: Dict[str, Any] = {}
    seen: Dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got '{line}'", path, number)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown key '{key}'", path, number)
        if key in seen:
            raise ConfigError(f"duplicate key '{key}' (first set on line {seen[key]})", path, number)
        if not value:
            raise ConfigError(f"missing value for '{key}'", path, number)
        attr, parser, _ = CONFIG_KEYS[key]
        try:
            values[attr] = parser(value)
        except ValueError as e:
            raise ConfigError(f"bad value for '{key}': {str(e)}", path, number) from e
        seen[key] = number

    config = replace(DEFAULTS, **values)
    if validate:
        try:
            config.validate()
        except ValueError as e:
            raise ConfigError(str(e), path) from e
    return config


def load_config(path) -> ExperimentConfig:
    """Read and parse a configuration file"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read configuration: {str(e)}", str(path)) from e
    config = parse_config(text, str(path))
    logger.info(f"Loaded configuration from {path}")
    return config


def apply_overrides(config: ExperimentConfig, runs: Optional[int] = None, seed: Optional[int] = None,
                    schemes: Optional[str] = None) -> ExperimentConfig:
    """Command-line overrides; the result is validated again"""
    changes: Dict[str, Any] = {}
    if runs is not None:
        changes["runs"] = runs
    if seed is not None:
        changes["seed"] = seed
    if schemes is not None:
        try:
            changes["schemes"] = _parse_schemes(schemes)
        except ValueError as e:
            raise ConfigError(f"--scheme: {str(e)}") from e
    if not changes:
        return config
    config = replace(config, **changes)
    try:
        config.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return config


def config_echo(config: ExperimentConfig) -> str:
    """Render a configuration in the file format, one key per line"""
    lines = []
    for key, (attr, _, fmt) in CONFIG_KEYS.items():
        lines.append(f"{key} = {fmt(getattr(config, attr))}")
    return "\n".join(lines) + "\n"

