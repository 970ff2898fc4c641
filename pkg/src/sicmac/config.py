"""
Configuration loading.

The config file is JSON with up to four sections::

    {
      "scenario":   {"num_users": 3, "ap_antennas": 2, "distances_m": [3, 3, 3]},
      "experiment": {"mode": "max_rate", "sweep_variable": "snr", "sweep_values": [-10, 0, 10]},
      "solver":     {"rate_tol": 1e-4},
      "ntfy":       {"enabled": true, "topic": "sicmac-runs"}
    }

Keys are the field names of ScenarioConfig, ExperimentSpec and SolverOptions.
Every field also has a ``--field-name`` command-line override. Precedence is
defaults < file < flags. Unknown keys are errors.
"""

import argparse
import dataclasses
import json
import logging
import os
from pathlib import Path
from typing import Any

from sicmac.channel import ScenarioConfig
from sicmac.errors import ConfigError, DomainError
from sicmac.harness import ExperimentSpec
from sicmac.solver import SolverOptions

logger = logging.getLogger(__name__)

ENV_CONFIG = "SICMAC_CONFIG"
DEFAULT_CONFIG_FILE = "config.json"

NTFY_KEYS = {
    "enabled",
    "url",
    "topic",
    "token",
    "priority",
    "failure_priority",
    "rate_limit_seconds",
    "state_file",
    "notify_on_finish",
}

_INT = {"num_users", "ap_antennas", "num_subcarriers", "seed", "max_outer_iters", "max_orders", "max_inner_iters", "trials"}
_BOOL = {"trace", "balance_ties"}
_STR = {"mode", "sweep_variable"}
_FLOAT_TUPLE = {"distances_m", "theta_w", "weights", "sweep_values"}
_STR_TUPLE = {"methods"}
# a single value or one value per user
_INT_OR_TUPLE = {"antennas_per_user"}
_FLOAT_OR_TUPLE = {"target_mbps"}
_OPTIONAL = {"distances_m", "snr_db", "sweep_variable", "theta_w", "weights"}

_EXPERIMENT_FIELDS = [f.name for f in dataclasses.fields(ExperimentSpec) if f.name not in ("scenario", "solver")]
SECTION_FIELDS = {
    "scenario": [f.name for f in dataclasses.fields(ScenarioConfig)],
    "experiment": _EXPERIMENT_FIELDS,
    "solver": [f.name for f in dataclasses.fields(SolverOptions)],
}


def find_config_path(explicit: str | Path | None = None) -> Path | None:
    """``--config`` first, then $SICMAC_CONFIG, then ./config.json if it exists."""
    if explicit:
        return Path(explicit)
    env = os.environ.get(ENV_CONFIG)
    if env:
        return Path(env)
    default = Path(DEFAULT_CONFIG_FILE)
    return default if default.exists() else None


def load_config(path: str | Path | None = None) -> dict[str, Any]:
    """Read and sanity-check the JSON config; an absent default file yields an empty config."""
    resolved = find_config_path(path)
    if resolved is None:
        logger.debug("No config file found, using defaults")
        return {}
    try:
        data = json.loads(resolved.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{resolved} is not valid JSON: {e}") from e
    except OSError as e:
        raise ConfigError(f"Error reading {resolved}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{resolved} must contain a JSON object")
    unknown = set(data) - {*SECTION_FIELDS, "ntfy"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    logger.info("Loaded configuration from %s", resolved)
    return data


def _split(value: Any) -> list[Any]:
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    if isinstance(value, list | tuple):
        return list(value)
    return [value]


def _to_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("true", "1", "yes", "on"):
        return True
    if text in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def coerce(name: str, value: Any) -> Any:
    """Convert a JSON or command-line value to the type of field ``name``."""
    if value is None or (name in _OPTIONAL and isinstance(value, str) and value.lower() in ("", "none", "null")):
        return None
    try:
        if name in _INT:
            return int(value)
        if name in _BOOL:
            return _to_bool(value)
        if name in _STR:
            return str(value)
        if name in _FLOAT_TUPLE:
            return tuple(float(v) for v in _split(value))
        if name in _STR_TUPLE:
            return tuple(str(v) for v in _split(value))
        if name in _INT_OR_TUPLE:
            parts = _split(value)
            return int(parts[0]) if len(parts) == 1 and not isinstance(value, list | tuple) else tuple(int(v) for v in parts)
        if name in _FLOAT_OR_TUPLE:
            parts = _split(value)
            return float(parts[0]) if len(parts) == 1 and not isinstance(value, list | tuple) else tuple(float(v) for v in parts)
        return float(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value for {name}: {value!r} ({e})") from e


def _section(config: dict[str, Any], overrides: dict[str, dict[str, Any]], name: str) -> dict[str, Any]:
    from_file = config.get(name, {}) or {}
    if not isinstance(from_file, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = set(from_file) - set(SECTION_FIELDS[name])
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {sorted(unknown)}")
    merged = dict(from_file)
    merged.update({k: v for k, v in overrides.get(name, {}).items() if v is not None})
    return {key: coerce(key, value) for key, value in merged.items()}


def build_experiment(
    config: dict[str, Any], overrides: dict[str, dict[str, Any]] | None = None
) -> tuple[ExperimentSpec, dict[str, Any]]:
    """ExperimentSpec plus the ntfy settings from a loaded config and flag overrides."""
    overrides = overrides or {}
    ntfy = config.get("ntfy", {}) or {}
    unknown = set(ntfy) - NTFY_KEYS
    if unknown:
        raise ConfigError(f"unknown key(s) in 'ntfy': {sorted(unknown)}")
    try:
        scenario = ScenarioConfig(**_section(config, overrides, "scenario"))
        solver = SolverOptions(**_section(config, overrides, "solver"))
        spec = ExperimentSpec(scenario=scenario, solver=solver, **_section(config, overrides, "experiment"))
    except DomainError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e
    return spec, dict(ntfy)


def add_override_arguments(parser: argparse.ArgumentParser, skip: frozenset[str] = frozenset()) -> None:
    """One ``--field-name`` flag per configurable field, grouped by section; ``skip`` holds ``section.field`` names."""
    for section, names in SECTION_FIELDS.items():
        group = parser.add_argument_group(f"{section} overrides")
        for name in names:
            if f"{section}.{name}" in skip:
                continue
            group.add_argument(
                f"--{name.replace('_', '-')}",
                dest=f"{section}__{name}",
                metavar="VALUE",
                default=None,
                help=f"override {section}.{name}",
            )


def overrides_from_args(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    overrides: dict[str, dict[str, Any]] = {section: {} for section in SECTION_FIELDS}
    for dest, value in vars(args).items():
        section, sep, name = dest.partition("__")
        if sep and section in overrides and value is not None:
            overrides[section][name] = value
    return overrides
