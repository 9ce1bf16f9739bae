"""
TOML run configuration.

A config has top-level ``seed`` and ``output`` keys and three tables::

    seed = 7
    output = "runs/torus"

    [system]
    kind = "flat_torus_sin_field"
    amplitude = 1.0

    [discretization]
    N = 32
    K = 33

    [parameters]
    kappas = { start = 0.001, stop = 0.0028, num = 8 }
    n = [1, 2, 3]
    seeds = [{ type = "line", x1 = 0.5, winding = [0, 1] }]
    target = { type = "detour" }

Every validation error carries the line of the offending key.
"""

from __future__ import annotations

import logging
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import loops as lp
from .errors import ConfigError, GeometryError
from .geometry import BUILTIN_KINDS, MagneticSystem, builtin_system

log = logging.getLogger(__name__)

DISCRETIZATION_DEFAULTS = {
    "N": 32,
    "K": 33,
    "crit_tol": 1e-6,
    "steps": 4096,
    "bott_grid": 64,
    "t_floor": lp.T_FLOOR,
    "tear_tol": 1e-4,
    "dedup_tol": 1e-3,
    "neg_margin": 1e-4,
    "max_iter": 20000,
}
_INTEGER_KEYS = {"N", "K", "steps", "bott_grid", "max_iter"}
_TOP_KEYS = {"seed", "output", "system", "discretization", "parameters"}
_PARAMETER_KEYS = {
    "kappa", "kappas", "n", "seeds", "target", "bracket", "bisection_steps", "T", "x0", "v0",
    "matrix", "t", "random_seeds", "loops", "loop", "start", "jobs",
}

_HEADER = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-]+)\s*\]")
_KEY = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")


def key_lines(text: str) -> dict:
    """Map ``(table, key)`` to the 1-based line where the key is assigned."""
    out = {}
    table = ""
    for no, line in enumerate(text.splitlines(), start=1):
        m = _HEADER.match(line)
        if m:
            table = m.group(1)
            out.setdefault((table, ""), no)
            continue
        m = _KEY.match(line)
        if m:
            out.setdefault((table, m.group(1)), no)
    return out


@dataclass
class RunConfig:
    system_spec: dict
    discretization: dict
    parameters: dict
    seed: int = 0
    output: str = "run"
    lines: dict = field(default_factory=dict, repr=False)
    source: str | None = None

    def line(self, table: str, key: str = "") -> int | None:
        return self.lines.get((table, key), self.lines.get((table, "")))

    def error(self, table: str, key: str, message: str) -> ConfigError:
        where = f"{table}.{key}" if table and key else (key or table)
        return ConfigError(f"{where}: {message}", self.line(table, key))

    # typed accessors for [parameters] -------------------------------------

    def has(self, key: str) -> bool:
        return key in self.parameters

    def require(self, key: str):
        if key not in self.parameters:
            raise self.error("parameters", key, "is required for this command")
        return self.parameters[key]

    def positive(self, key: str, default=None) -> float:
        if key not in self.parameters and default is not None:
            return float(default)
        v = self.require(key)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
            raise self.error("parameters", key, f"must be a positive number, got {v!r}")
        return float(v)

    def integer(self, key: str, default=None, minimum: int = 0) -> int:
        if key not in self.parameters and default is not None:
            return int(default)
        v = self.require(key)
        if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
            raise self.error("parameters", key, f"must be an integer >= {minimum}, got {v!r}")
        return v

    def vector(self, key: str, length: int = 2) -> np.ndarray:
        v = self.require(key)
        if (not isinstance(v, list) or len(v) != length
                or not all(isinstance(a, (int, float)) and not isinstance(a, bool) for a in v)):
            raise self.error("parameters", key, f"must be a list of {length} numbers")
        return np.array(v, dtype=float)

    def kappa_grid(self) -> list:
        v = self.require("kappas")
        if isinstance(v, dict):
            try:
                start, stop, num = float(v["start"]), float(v["stop"]), int(v["num"])
            except (KeyError, TypeError, ValueError):
                raise self.error("parameters", "kappas",
                                 "table form needs numeric start, stop and num") from None
            if num < 1:
                raise self.error("parameters", "kappas", "num must be positive")
            grid = np.linspace(start, stop, num).tolist()
        elif isinstance(v, list):
            grid = v
        else:
            raise self.error("parameters", "kappas", "must be a list or {start, stop, num}")
        if not all(isinstance(k, (int, float)) and not isinstance(k, bool) and k > 0
                   for k in grid):
            raise self.error("parameters", "kappas", "energies must be positive numbers")
        grid = [float(k) for k in grid]
        if any(b <= a for a, b in zip(grid[:-1], grid[1:])):
            raise self.error("parameters", "kappas", "energies must be strictly increasing")
        return grid

    def orders(self) -> list:
        v = self.parameters.get("n", 1)
        vals = v if isinstance(v, list) else [v]
        if not vals or not all(isinstance(n, int) and not isinstance(n, bool) and n >= 1
                               for n in vals):
            raise self.error("parameters", "n", "iteration orders must be positive integers")
        return sorted(set(vals))

    def bracket(self) -> tuple:
        v = self.require("bracket")
        if (not isinstance(v, list) or len(v) != 2
                or not all(isinstance(a, (int, float)) and not isinstance(a, bool) for a in v)
                or not 0 <= v[0] < v[1]):
            raise self.error("parameters", "bracket", "must be [lo, hi] with 0 <= lo < hi")
        return float(v[0]), float(v[1])

    def disc(self, key: str):
        return self.discretization[key]

    def build_system(self) -> MagneticSystem:
        spec = dict(self.system_spec)
        kind = spec.pop("kind")
        try:
            return builtin_system(kind, **spec)
        except GeometryError as exc:
            raise self.error("system", "", str(exc)) from None

    # loop builders ----------------------------------------------------------

    def loop_from_spec(self, spec, key: str, kappa: float, system: MagneticSystem,
                       N: int) -> lp.DiscreteLoop:
        """Build a loop from ``{type = ...}`` (line, circle, polygon, detour or file)."""
        if not isinstance(spec, dict) or "type" not in spec:
            raise self.error("parameters", key, "loop entries need a 'type'")
        kind = spec["type"]
        try:
            period = spec.get("T")
            if kind == "line":
                start = [float(spec.get("x1", 0.5)), float(spec.get("x2", 0.0))]
                winding = tuple(int(w) for w in spec.get("winding", (0, 1)))
                length = float(np.hypot(*winding))
                T = period or length / np.sqrt(2.0 * kappa)
                return lp.line_loop(start, winding, T, N)
            if kind == "circle":
                T = period or 2.0 * np.pi * float(spec["radius"]) / np.sqrt(2.0 * kappa)
                return lp.circle_loop([float(a) for a in spec["center"]], float(spec["radius"]),
                                      T, N, clockwise=bool(spec.get("clockwise", False)))
            if kind == "polygon":
                shape = lp.polygon_loop(spec["vertices"], 1.0, N,
                                        tuple(int(w) for w in spec.get("winding", (0, 0))))
                if period:
                    return shape.with_(period=float(period))
                K = lp.action_parts(system, kappa, shape)["K"]
                return shape.with_(period=float(np.sqrt(K / kappa)))
            if kind == "detour":
                from .search import detour_target
                return detour_target(system, float(spec.get("kappa", kappa)), N)
            if kind == "file":
                from .io import read_json
                base = Path(self.source).parent if self.source else Path(".")
                return lp.loop_from_record(read_json(base / spec["path"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise self.error("parameters", key, f"bad {kind!r} loop: {exc}") from None
        raise self.error("parameters", key, f"unknown loop type {kind!r}")


def _check_discretization(raw: dict, lines: dict) -> dict:
    out = dict(DISCRETIZATION_DEFAULTS)
    for key, value in raw.items():
        line = lines.get(("discretization", key))
        if key not in DISCRETIZATION_DEFAULTS:
            raise ConfigError(f"discretization.{key}: unknown key", line)
        if key in _INTEGER_KEYS:
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"discretization.{key}: must be a positive integer", line)
        elif isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
            raise ConfigError(f"discretization.{key}: tolerances must be positive", line)
        out[key] = value
    if out["N"] < lp.MIN_NODES:
        raise ConfigError(f"discretization.N: need at least {lp.MIN_NODES} nodes",
                          lines.get(("discretization", "N")))
    if out["K"] < 17:
        raise ConfigError("discretization.K: a path needs at least 17 loops",
                          lines.get(("discretization", "K")))
    if out["N"] & (out["N"] - 1):
        log.warning("discretization.N = %d is not a power of two", out["N"])
    return out


def parse_config(text: str, source: str | None = None) -> RunConfig:
    """Parse and validate config text."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"invalid TOML: {exc}", int(m.group(1)) if m else None) from None
    lines = key_lines(text)
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown top-level key {key!r}", lines.get(("", key),
                                                                       lines.get((key, ""))))
    system = raw.get("system")
    if not isinstance(system, dict) or "kind" not in system:
        raise ConfigError("a [system] table with a 'kind' is required", lines.get(("system", "")))
    kind = system["kind"]
    if kind not in BUILTIN_KINDS:
        raise ConfigError(f"system.kind: unknown kind {kind!r}; known: {sorted(BUILTIN_KINDS)}",
                          lines.get(("system", "kind")))
    for key, value in system.items():
        if key == "kind":
            continue
        line = lines.get(("system", key))
        if key not in BUILTIN_KINDS[kind]:
            raise ConfigError(f"system.{key}: not a parameter of {kind!r}", line)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"system.{key}: must be a number", line)
    disc = _check_discretization(raw.get("discretization", {}), lines)
    params = raw.get("parameters", {})
    if not isinstance(params, dict):
        raise ConfigError("[parameters] must be a table", lines.get(("", "parameters")))
    for key in params:
        if key not in _PARAMETER_KEYS:
            raise ConfigError(f"parameters.{key}: unknown key", lines.get(("parameters", key)))
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed: must be a nonnegative integer", lines.get(("", "seed")))
    output = raw.get("output", "run")
    if not isinstance(output, str) or not output:
        raise ConfigError("output: must be a nonempty string", lines.get(("", "output")))
    return RunConfig(dict(system), disc, dict(params), seed, output, lines, source)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))
