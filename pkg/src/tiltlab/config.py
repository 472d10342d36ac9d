"""Plain-text experiment configuration: key = value lines, '#' comments."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

KINDS = (
    "attack-hypercube",
    "attack-random",
    "ada-run",
    "mech-bench",
    "verify-structure",
    "divergence-check",
)


class ConfigError(ValueError):
    """Malformed configuration text; the message names the offending line."""


@dataclass
class ExperimentConfig:
    """Every knob for one experiment run.

    A run is fully determined by (config, master seed).  Fields that default
    to None are derived from the others at run time (documented per kind in
    the experiments module).
    """

    kind: str
    trials: int = 1
    # family shape
    d: int = 64
    m: int = 6
    k: int = 64
    n_columns: int = 256
    # sampling
    n: int = 4
    fresh: int = 1000
    region: str = "l2-sphere"
    radius: Optional[float] = None
    theta_mode: str = "sampled"
    # privacy parameters
    epsilon: float = 1.0
    delta: float = 1e-6
    alpha: float = 0.125
    # mechanism / analyst selection
    mechanism: str = "exact-mean"
    bound: float = 0.5
    analyst: str = "exact-mean"
    sigma: float = 0.0
    folds: int = 2
    # staged protocol
    tau: Optional[float] = None
    C: float = 2.0
    W: Optional[int] = None
    mc_accuracy: int = 2048
    mc_gap: int = 8192
    # structure checks
    k_subset: int = 3
    n_subsets: int = 10_000
    n_theta: int = 200
    cap_scale: float = 0.1
    eta_probe: Optional[float] = None
    # mech-bench histograms
    support: int = 32
    mass: float = 1000.0
    universe: Optional[int] = None
    # output
    out: str = ""


def _to_int(text: str) -> int:
    return int(text, 0)


def _to_float(text: str) -> float:
    return float(text)


def _to_str(text: str) -> str:
    return text


_CONVERTERS = {int: _to_int, float: _to_float, str: _to_str}

# Optional fields parse with the converter of their inner type
_OPTIONAL_TYPES = {
    "radius": float,
    "tau": float,
    "W": int,
    "eta_probe": float,
    "universe": int,
}


_ANNOTATIONS = {"int": int, "float": float, "str": str}


def _field_converter(name: str, annotation: str):
    if name in _OPTIONAL_TYPES:
        return _CONVERTERS[_OPTIONAL_TYPES[name]]
    return _CONVERTERS[_ANNOTATIONS[annotation]]


_SCHEMA = {f.name: _field_converter(f.name, f.type)
           for f in fields(ExperimentConfig)}


def parse_config(text: str) -> ExperimentConfig:
    """Parse key = value lines into a typed config.

    '#' starts a comment (whole-line or trailing); blank lines are skipped.
    Unknown keys and bad values are rejected with their line number; kind is
    the one required key.
    """
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _SCHEMA[key](val)
        except ValueError:
            want = _SCHEMA[key].__name__.replace("_to_", "")
            raise ConfigError(
                f"line {lineno}: invalid {want} for {key!r}: {val!r}"
            ) from None
    if "kind" not in values:
        raise ConfigError("kind is required")
    if values["kind"] not in KINDS:
        raise ConfigError(
            f"unknown kind {values['kind']!r}; expected one of {', '.join(KINDS)}"
        )
    cfg = ExperimentConfig(**values)
    if cfg.trials < 0:
        raise ConfigError("trials must be nonnegative")
    return cfg
