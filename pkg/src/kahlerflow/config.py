"""Run configuration: strict single-document JSON with explicit versioning.

Unknown keys are rejected; every violation names the offending key.  The
minimal valid document is ``{"n": 1, "N": 64, "dt": 0.01, "t_max": 5}``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

FORMAT_VERSION = 1

_DEFAULTS = {
    "format_version": FORMAT_VERSION,
    "n": 1,
    "N": 96,
    "scheme": "semi-implicit",
    "initial_kind": "zero",
    "amplitude": 0.1,
    "profile": 2,
    "initial_file": None,
    "tol_normalization": 1e-10,
    "tol_convergence": 1e-8,
    "tol_invariant": 1e-8,
    "monitors": ["functionals", "estimates"],
    "output_dir": "run-output",
    "snapshot_stride": 10,
    "seed": 0,
}
_REQUIRED = ("dt", "t_max")
_KNOWN = set(_DEFAULTS) | set(_REQUIRED)
_SCHEMES = ("semi-implicit", "rk4")
_KINDS = ("zero", "perturbation", "file")
_MONITORS = ("functionals", "estimates")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    n: int
    N: int
    dt: float
    t_max: float
    scheme: str = "semi-implicit"
    initial_kind: str = "zero"
    amplitude: float = 0.1
    profile: int = 2
    initial_file: str = None
    tol_normalization: float = 1e-10
    tol_convergence: float = 1e-8
    tol_invariant: float = 1e-8
    monitors: tuple = ("functionals", "estimates")
    output_dir: str = "run-output"
    snapshot_stride: int = 10
    seed: int = 0
    format_version: int = FORMAT_VERSION

    def to_document(self) -> dict:
        doc = {k: getattr(self, k) for k in _KNOWN}
        doc["monitors"] = list(self.monitors)
        return doc


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def parse_config(text: str) -> RunConfig:
    """Parse and validate a config document (JSON text)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    _require(isinstance(doc, dict), "config document must be a JSON object")
    unknown = sorted(set(doc) - _KNOWN)
    _require(not unknown, f"unknown config key(s): {', '.join(unknown)}")
    missing = sorted(k for k in _REQUIRED if k not in doc)
    _require(not missing, f"missing required key(s): {', '.join(missing)}")

    merged = dict(_DEFAULTS)
    merged.update(doc)

    _require(merged["format_version"] == FORMAT_VERSION,
             f"format_version: expected {FORMAT_VERSION}, got {merged['format_version']!r}")
    _require(isinstance(merged["n"], int) and merged["n"] >= 1, "n: must be an integer >= 1")
    _require(isinstance(merged["N"], int) and merged["N"] >= 16, "N: must be an integer >= 16")
    for key in ("dt", "t_max"):
        v = merged[key]
        _require(isinstance(v, (int, float)) and v > 0, f"{key}: must be > 0")
    for key in ("tol_normalization", "tol_convergence", "tol_invariant"):
        v = merged[key]
        _require(isinstance(v, (int, float)) and v > 0, f"{key}: must be positive")
    _require(merged["scheme"] in _SCHEMES, f"scheme: must be one of {_SCHEMES}")
    _require(merged["initial_kind"] in _KINDS, f"initial_kind: must be one of {_KINDS}")
    if merged["initial_kind"] == "file":
        _require(bool(merged["initial_file"]), "initial_file: required when initial_kind is 'file'")
    _require(isinstance(merged["profile"], int) and merged["profile"] >= 1,
             "profile: must be an integer >= 1")
    _require(isinstance(merged["amplitude"], (int, float)), "amplitude: must be a number")
    _require(isinstance(merged["snapshot_stride"], int) and merged["snapshot_stride"] >= 1,
             "snapshot_stride: must be an integer >= 1")
    _require(isinstance(merged["seed"], int), "seed: must be an integer")
    mons = merged["monitors"]
    _require(isinstance(mons, (list, tuple)), "monitors: must be a list")
    bad = sorted(set(mons) - set(_MONITORS))
    _require(not bad, f"monitors: unknown entries {', '.join(map(str, bad))}")
    merged["monitors"] = tuple(mons)

    return RunConfig(**{k: merged[k] for k in RunConfig.__dataclass_fields__})


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())
