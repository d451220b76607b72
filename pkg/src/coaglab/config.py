"""Run configuration: a single TOML file, overridable from the command line.

Example (every key shown with its default where one exists):

    n = 1000
    horizon = 1.0
    grid = [0.5, 1.0]          # snapshot times, sorted, within [0, horizon]
    truncation = 64
    replicas = 100
    master_seed = 7
    strategy = "thinning"       # or "direct"
    track_martingale = true
    accumulator_mode = "incremental"
    workers = 0                 # 0 = all available cores, capped by replicas
    out = "out"

    [kernel]
    kind = "constant"           # "capped-brownian" {c0, cap} | "lookup-table" {entries, default}
    c = 1.0

    [solver]
    dt = 1e-3                   # or atol = 1e-8 for the adaptive mode

    [fluct]
    functionals = [[1], [2], [3]]   # indicator supports for dual solves
    times = [1.0]

    [tolerances]
    variance_rel = 0.15
    mean_z = 3.0
    shape_z = 5.0
    route_discrepancy = 1e-5
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field
from typing import Any, Mapping

from . import kernels
from .kernels import KernelSpec

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


_DEFAULTS: dict[str, Any] = {
    "n": 1000,
    "horizon": 1.0,
    "grid": [1.0],
    "truncation": 64,
    "replicas": 1,
    "master_seed": 0,
    "strategy": "thinning",
    "track_martingale": True,
    "accumulator_mode": "incremental",
    "workers": 0,
    "out": "out",
    "kernel": {"kind": "constant", "c": 1.0},
    "solver": {"dt": 1e-3},
    # empty times means "predict at the horizon"
    "fluct": {"functionals": [[1], [2], [3]], "times": []},
    "tolerances": {
        "variance_rel": 0.15,
        "mean_z": 3.0,
        "var_z": 3.0,
        "shape_z": 5.0,
        "moment_z": 3.0,
        "oracle_z": 3.0,
        "route_discrepancy": 1e-5,
    },
    # free-form per-check keyword overrides for the validate subcommand,
    # e.g. [validate.clt_variance] replicas = 200
    "validate": {},
}


@dataclass(frozen=True)
class RunConfig:
    """Validated run parameters plus the raw mapping they came from."""

    raw: dict
    kernel: KernelSpec = field(compare=False)

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def n(self) -> int:
        return self.raw["n"]

    @property
    def grid(self) -> list:
        return self.raw["grid"]

    @property
    def horizon(self) -> float:
        return self.raw["horizon"]

    @property
    def truncation(self) -> int:
        return self.raw["truncation"]

    @property
    def replicas(self) -> int:
        return self.raw["replicas"]

    @property
    def master_seed(self) -> int:
        return self.raw["master_seed"]

    @property
    def strategy(self) -> str:
        return self.raw["strategy"]

    @property
    def tolerances(self) -> dict:
        return self.raw["tolerances"]

    def run_id(self, command: str) -> str:
        """Content hash of the effective config; names the output directory."""
        blob = json.dumps({"command": command, "config": self.raw}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def merge_mappings(base: dict, override: Mapping) -> dict:
    """Recursive dict merge; override wins on scalar conflicts."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = merge_mappings(out[k], v)
        else:
            out[k] = copy.deepcopy(v) if isinstance(v, (dict, list)) else v
    return out


def _fail(key: str, why: str):
    raise ConfigError(f"config key '{key}': {why}")


def validate_raw(raw: dict) -> RunConfig:
    """Type- and range-check a merged config mapping."""
    known = set(_DEFAULTS)
    for k in raw:
        if k not in known:
            _fail(k, "unknown key")
    if not isinstance(raw["n"], int) or raw["n"] < 1:
        _fail("n", "must be a positive integer")
    if raw["horizon"] < 0:
        _fail("horizon", "must be nonnegative")
    grid = raw["grid"]
    if not isinstance(grid, list) or not grid:
        _fail("grid", "must be a nonempty list of times")
    if sorted(grid) != grid:
        _fail("grid", "must be sorted")
    if grid[0] < 0 or grid[-1] > raw["horizon"] + 1e-12:
        _fail("grid", f"must lie within [0, horizon={raw['horizon']}]")
    if not isinstance(raw["truncation"], int) or raw["truncation"] < 1:
        _fail("truncation", "must be a positive integer")
    if not isinstance(raw["replicas"], int) or raw["replicas"] < 1:
        _fail("replicas", "must be a positive integer")
    seed = raw["master_seed"]
    if not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        _fail("master_seed", "must be an unsigned 64-bit integer")
    if raw["strategy"] not in ("thinning", "direct"):
        _fail("strategy", "must be 'thinning' or 'direct'")
    if raw["accumulator_mode"] not in ("incremental", "full"):
        _fail("accumulator_mode", "must be 'incremental' or 'full'")
    if not isinstance(raw["workers"], int) or raw["workers"] < 0:
        _fail("workers", "must be a nonnegative integer (0 = auto)")
    try:
        kernel = kernels.from_config(raw["kernel"])
    except (KeyError, kernels.KernelError, TypeError) as exc:
        _fail("kernel", str(exc))
    solver = raw["solver"]
    dt = solver.get("dt")
    atol = solver.get("atol")
    if atol is not None:
        if not 0 < atol <= 1e-6:
            _fail("solver.atol", "must lie in (0, 1e-6]")
    elif dt is None:
        _fail("solver", "either dt or atol is required")
    else:
        if dt <= 0:
            _fail("solver.dt", "must be positive")
        if kernel.sup_norm > 0 and dt > 1.0 / (6.0 * kernel.sup_norm):
            _fail(
                "solver.dt",
                f"violates the stability bound 1/(6 supK) = {1.0 / (6.0 * kernel.sup_norm):.6g}",
            )
    fl = raw["fluct"]
    if not isinstance(fl.get("functionals"), list) or not all(
        isinstance(g, list) and g and all(isinstance(l, int) and l >= 1 for l in g)
        for g in fl["functionals"]
    ):
        _fail("fluct.functionals", "must be a list of nonempty lists of masses (>= 1)")
    for t in fl.get("times", []):
        if not 0 <= t <= raw["horizon"] + 1e-12:
            _fail("fluct.times", "must lie within [0, horizon]")
    for k, v in raw["tolerances"].items():
        if k not in _DEFAULTS["tolerances"]:
            _fail(f"tolerances.{k}", "unknown tolerance")
        if not isinstance(v, (int, float)) or v < 0:
            _fail(f"tolerances.{k}", "must be a nonnegative number")
    if not isinstance(raw["validate"], dict) or not all(
        isinstance(v, dict) for v in raw["validate"].values()
    ):
        _fail("validate", "must be a table of per-check keyword tables")
    return RunConfig(raw=raw, kernel=kernel)


def load_config(path: str | None, overrides: Mapping | None = None) -> RunConfig:
    """Merge defaults <- TOML file <- command-line overrides, then validate."""
    raw = copy.deepcopy(_DEFAULTS)
    if path is not None:
        try:
            with open(path, "rb") as f:
                data = _toml.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except _toml.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        raw = merge_mappings(raw, data)
    if overrides:
        raw = merge_mappings(raw, overrides)
    return validate_raw(raw)


def parse_override(text: str) -> dict:
    """Turn 'a.b=value' into a nested mapping; values parse as TOML scalars."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' must look like key=value")
    key, value = text.split("=", 1)
    try:
        parsed = _toml.loads(f"v = {value}")["v"]
    except _toml.TOMLDecodeError:
        parsed = value  # bare string
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node[part] = {}
        node = node[part]
    node[parts[-1]] = parsed
    return out
