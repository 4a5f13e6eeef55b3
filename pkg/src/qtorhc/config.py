"""Scenario configuration: JSON schema, validation, and problem assembly.

A scenario file is plain JSON naming a built-in plant, a controller mode,
and every loop/solver parameter needed to reproduce a run. Configs are
held as immutable plain data (tuples, not arrays) so equality and JSON
round-trips are exact; `resolve_scenario` turns one into the solver
template and loop config consumed by the run loop.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConfigError
from .ocp import OcpProblem
from .plants import ControlModel, make_model
from .rhc import RhcConfig
from .synthesis import TerminalData, synthesize_terminal

PLANTS = ("pendulum", "cartpole", "double_integrator")
MODES = ("qto", "time_optimal", "lq")

REQUIRED_FIELDS = ("plant", "mode", "x0", "delta", "T_min", "B_box", "W", "R")


@dataclass(frozen=True)
class ScenarioConfig:
    """One reproducible closed-loop experiment, as pure data."""

    plant: str
    mode: str
    x0: tuple
    delta: float
    T_min: float
    B_box: tuple
    W: tuple                       # state weight matrix, row tuples
    R: tuple                       # control weight matrix, row tuples
    xi: float = 0.1
    gamma: float = 2.0
    rho0: float = 100.0
    eps0: float = 0.0              # initial running-cost blend
    eps_seed: float = 0.01
    alpha: Optional[float] = None  # terminal level; None = largest certified
    k: float = 1.1
    N: int = 32
    h: Optional[float] = None      # plant integration step; None = delta / 10
    substeps: int = 2
    max_iter: int = 600
    warm_max_iter: Optional[int] = 40
    tol_g: float = 1e-4
    tol_T: float = 1e-6
    restarts: int = 0
    t0_range: Optional[tuple] = None
    max_steps: int = 400
    convergence_eps: float = 1e-3
    settle_threshold: float = 0.01
    seed: int = 0
    output_dir: Optional[str] = None

    @property
    def h_resolved(self) -> float:
        return self.delta / 10.0 if self.h is None else self.h


class RunSetup(NamedTuple):
    """A scenario resolved into runnable pieces."""

    model: ControlModel
    terminal: TerminalData
    template: OcpProblem
    rhc: RhcConfig


def _tuplize(value):
    if isinstance(value, (list, tuple)):
        return tuple(_tuplize(v) for v in value)
    return value


def _matrix_shape(value) -> Optional[tuple]:
    if not isinstance(value, tuple) or not value:
        return None
    if not all(isinstance(row, tuple) for row in value):
        return None
    widths = {len(row) for row in value}
    if len(widths) != 1:
        return None
    return len(value), widths.pop()


def _check_number(raw: dict, name: str, msgs: list, *, integer: bool = False,
                  optional: bool = False):
    if name not in raw or raw[name] is None:
        if not optional:
            msgs.append(f"missing field: {name}")
        return None
    value = raw[name]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        msgs.append(f"{name} must be a number, got {type(value).__name__}")
        return None
    if integer and int(value) != value:
        msgs.append(f"{name} must be an integer, got {value}")
        return None
    return int(value) if integer else float(value)


def validate_config_dict(raw: dict) -> ScenarioConfig:
    """Build a ScenarioConfig from a parsed JSON dict, or raise ConfigError
    carrying every problem found."""
    msgs = []
    known = {f.name for f in dataclasses.fields(ScenarioConfig)}
    for key in raw:
        if key not in known:
            msgs.append(f"unknown field: {key}")
    for key in ("plant", "mode"):
        if key not in raw:
            msgs.append(f"missing field: {key}")

    plant = raw.get("plant")
    model = None
    if plant is not None:
        if plant not in PLANTS:
            msgs.append(f"plant must be one of {', '.join(PLANTS)}, got {plant!r}")
        else:
            model = make_model(plant)
    mode = raw.get("mode")
    if mode is not None:
        mode = str(mode).replace("-", "_")
        if mode not in MODES:
            msgs.append(f"mode must be one of {', '.join(MODES)}, got {raw['mode']!r}")

    numbers = {}
    for name in ("delta", "T_min", "xi", "gamma", "rho0", "eps0", "eps_seed",
                 "k", "tol_g", "tol_T", "convergence_eps", "settle_threshold"):
        optional = name not in REQUIRED_FIELDS
        val = _check_number(raw, name, msgs, optional=optional)
        if val is not None:
            numbers[name] = val
    for name in ("N", "substeps", "max_iter", "max_steps", "seed"):
        val = _check_number(raw, name, msgs, integer=True, optional=True)
        if val is not None:
            numbers[name] = val
    val = _check_number(raw, "alpha", msgs, optional=True)
    if val is not None:
        numbers["alpha"] = val
    val = _check_number(raw, "h", msgs, optional=True)
    if val is not None:
        numbers["h"] = val
    val = _check_number(raw, "warm_max_iter", msgs, integer=True, optional=True)
    if val is not None:
        numbers["warm_max_iter"] = val
    val = _check_number(raw, "restarts", msgs, integer=True, optional=True)
    if val is not None:
        numbers["restarts"] = val

    vectors = {}
    for name in ("x0", "B_box"):
        if name not in raw:
            msgs.append(f"missing field: {name}")
            continue
        value = _tuplize(raw[name])
        if (not isinstance(value, tuple) or not value
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                           for v in value)):
            msgs.append(f"{name} must be a list of numbers")
            continue
        vectors[name] = tuple(float(v) for v in value)

    matrices = {}
    for name in ("W", "R"):
        if name not in raw:
            msgs.append(f"missing field: {name}")
            continue
        value = _tuplize(raw[name])
        shape = _matrix_shape(value)
        if shape is None:
            msgs.append(f"{name} must be a rectangular matrix (list of rows)")
            continue
        matrices[name] = tuple(tuple(float(v) for v in row) for row in value)

    t0_range = None
    if raw.get("t0_range") is not None:
        value = _tuplize(raw["t0_range"])
        if (not isinstance(value, tuple) or len(value) != 2
                or not all(isinstance(v, (int, float)) for v in value)):
            msgs.append("t0_range must be a pair of numbers")
        else:
            t0_range = (float(value[0]), float(value[1]))
            if not 0.0 < t0_range[0] <= t0_range[1]:
                msgs.append(f"t0_range = {t0_range} must be increasing and positive")

    output_dir = raw.get("output_dir")
    if output_dir is not None and not isinstance(output_dir, str):
        msgs.append("output_dir must be a string path")
        output_dir = None

    # dimension consistency against the plant
    if model is not None:
        n, m = model.n, model.m
        if "x0" in vectors and len(vectors["x0"]) != n:
            msgs.append(f"x0 has {len(vectors['x0'])} entries, {plant} needs {n}")
        if "B_box" in vectors and len(vectors["B_box"]) != n:
            msgs.append(f"B_box has {len(vectors['B_box'])} entries, {plant} needs {n}")
        if "W" in matrices and _matrix_shape(matrices["W"]) != (n, n):
            msgs.append(f"W must be {n} x {n} for {plant}")
        if "R" in matrices and _matrix_shape(matrices["R"]) != (m, m):
            msgs.append(f"R must be {m} x {m} for {plant}")

    # range checks mirroring the loop invariants, reported with field names
    def bad(name, condition, text):
        if name in numbers and condition(numbers[name]):
            msgs.append(f"{name} {text}, got {numbers[name]}")

    bad("delta", lambda v: v <= 0.0, "must be positive")
    if "delta" in numbers and "T_min" in numbers and numbers["T_min"] < numbers["delta"]:
        msgs.append(f"T_min = {numbers['T_min']} must be at least delta = {numbers['delta']}")
    bad("xi", lambda v: not 0.0 < v < 1.0, "must lie in (0, 1)")
    bad("gamma", lambda v: v <= 1.0, "must exceed 1")
    bad("rho0", lambda v: v < 1.0, "must be at least 1")
    bad("eps0", lambda v: not 0.0 <= v <= 1.0, "must lie in [0, 1]")
    bad("eps_seed", lambda v: not 0.0 < v < 1.0, "must lie in (0, 1)")
    bad("alpha", lambda v: v <= 0.0, "must be positive")
    bad("k", lambda v: v < 1.0, "must be at least 1")
    bad("h", lambda v: v <= 0.0, "must be positive")
    bad("N", lambda v: v < 1, "must be at least 1")
    bad("substeps", lambda v: v < 1, "must be at least 1")
    bad("max_iter", lambda v: v < 1, "must be at least 1")
    bad("warm_max_iter", lambda v: v < 1, "must be at least 1")
    bad("restarts", lambda v: v < 0, "must be non-negative")
    bad("max_steps", lambda v: v < 1, "must be at least 1")
    bad("convergence_eps", lambda v: v <= 0.0, "must be positive")
    bad("settle_threshold", lambda v: v <= 0.0, "must be positive")
    bad("seed", lambda v: v < 0, "must be non-negative")
    bad("tol_g", lambda v: v <= 0.0, "must be positive")
    bad("tol_T", lambda v: v <= 0.0, "must be positive")
    if "B_box" in vectors and not all(v > 0.0 for v in vectors["B_box"]):
        msgs.append("B_box entries must be positive")

    if msgs:
        raise ConfigError(msgs)

    fields = dict(plant=plant, mode=mode, x0=vectors["x0"],
                  B_box=vectors["B_box"], W=matrices["W"], R=matrices["R"],
                  t0_range=t0_range, output_dir=output_dir)
    fields.update(numbers)
    defaults = {f.name: f.default for f in dataclasses.fields(ScenarioConfig)
                if f.default is not dataclasses.MISSING}
    for name, default in defaults.items():
        fields.setdefault(name, default)
    return ScenarioConfig(**fields)


def config_to_dict(config: ScenarioConfig) -> dict:
    """Plain-JSON view of a config; inverse of validate_config_dict."""
    out = dataclasses.asdict(config)
    for name in ("x0", "B_box", "t0_range"):
        if out[name] is not None:
            out[name] = list(out[name])
    for name in ("W", "R"):
        out[name] = [list(row) for row in out[name]]
    return out


def load_config(path) -> ScenarioConfig:
    """Read and validate a scenario file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"])
    except json.JSONDecodeError as err:
        raise ConfigError([f"config is not valid JSON: {err}"])
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a JSON object"])
    return validate_config_dict(raw)


def save_config(config: ScenarioConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2,
                                     sort_keys=True) + "\n")


def bundled_scenario_names() -> list:
    root = resources.files("qtorhc").joinpath("scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def find_config(name_or_path) -> Path:
    """Resolve a --config argument: a real file wins, else a bundled name."""
    path = Path(name_or_path)
    if path.exists():
        return path
    stem = path.name[:-5] if path.name.endswith(".json") else path.name
    bundled = resources.files("qtorhc").joinpath("scenarios", stem + ".json")
    with resources.as_file(bundled) as concrete:
        if concrete.exists():
            return concrete
    raise ConfigError([
        f"config file not found: {name_or_path} "
        f"(bundled scenarios: {', '.join(bundled_scenario_names())})"])


def resolve_scenario(config: ScenarioConfig) -> RunSetup:
    """Synthesize the terminal controller and assemble solver/loop settings."""
    model = make_model(config.plant)
    W = np.array(config.W, dtype=float)
    R = np.array(config.R, dtype=float)
    terminal = synthesize_terminal(model, W, R, k=config.k, alpha=config.alpha)
    template = OcpProblem(
        model=model, terminal=terminal, W=W, R=R, epsilon=config.eps0,
        rho=config.rho0, T_min=config.T_min, x0=np.zeros(model.n),
        N=config.N, delta=config.delta, h=config.h_resolved,
        solver_substeps=config.substeps, max_iter=config.max_iter,
        tol_g=config.tol_g)
    rhc = RhcConfig(
        delta=config.delta, T_min=config.T_min,
        B_box=np.array(config.B_box, dtype=float), alpha=terminal.alpha,
        xi=config.xi, gamma=config.gamma, rho0=config.rho0,
        eps_seed=config.eps_seed, tol_T=config.tol_T,
        max_steps=config.max_steps)
    return RunSetup(model=model, terminal=terminal, template=template, rhc=rhc)
