"""Run configuration: TOML loading, validation and solver defaults.

One config file drives all CLI subcommands.  Block layout:

    [system]            n, m, states, drift, controls, strict_feedback
    [manifold]          ind, dep, h (1-based indices), or levelset + at;
                        optional mu = "name" for a parametrized family
    [solver]            tol, rank_tol, max_iter, arc_step, lambda, rtol, atol,
                        grid = { box = [[lo, hi], ...], step = s },
                        t_final, n_report, x0, seeds, mu_range, n_mu, gain...
    [output]            dir

Unused blocks are ignored with a warning by the subcommands that do not
consume them.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .sysmodel import ControlAffineSystem, LinearControlSystem, StrictFeedbackSystem
from .transverse import LevelSetManifold, TransverseManifold
from . import expr as ex


class ConfigError(ValueError):
    """Configuration file failed validation."""


@dataclass
class SolverConfig:
    tol: float = 1e-9
    rank_tol: float = 1e-10
    max_iter: int = 50
    arc_step: float | None = None  # default: 0.05 of the grid box diameter
    n_continuation_steps: int = 400
    gain: float = 1.0
    rtol: float = 1e-9
    atol: float = 1e-9
    t_final: float = 5.0
    n_report: int = 201
    grid_box: list = field(default_factory=lambda: [[-2.0, 2.0], [-2.0, 2.0]])
    grid_step: list = field(default_factory=lambda: [0.5])
    x0: list | None = None
    seeds: list | None = None
    seed_grid: bool = False
    mu_range: list = field(default_factory=lambda: [-1.0, 1.0])
    n_mu: int = 21
    match_radius: float = 0.5
    control_box: list | None = None

    def effective(self):
        """Solver values echoed into report headers, in a fixed key order."""
        return {
            "tol": self.tol,
            "rank_tol": self.rank_tol,
            "max_iter": self.max_iter,
            "arc_step": self.arc_step if self.arc_step is not None else self.default_arc_step(),
            "n_continuation_steps": self.n_continuation_steps,
            "lambda": self.gain,
            "rtol": self.rtol,
            "atol": self.atol,
            "t_final": self.t_final,
            "n_report": self.n_report,
            "grid_box": self.grid_box,
            "grid_step": self.grid_step,
            "mu_range": self.mu_range,
            "n_mu": self.n_mu,
            "match_radius": self.match_radius,
        }

    def box_diameter(self):
        import math

        return math.sqrt(sum((hi - lo) ** 2 for lo, hi in self.grid_box))

    def default_arc_step(self):
        return 0.05 * self.box_diameter()


@dataclass
class RunConfig:
    system: object  # ControlAffineSystem after normalization
    strict: StrictFeedbackSystem | None
    linear: LinearControlSystem | None
    manifold: object | None  # TransverseManifold or LevelSetManifold
    solver: SolverConfig
    output_dir: str
    warnings: list = field(default_factory=list)


def _require(table, key, kind, where):
    if key not in table:
        raise ConfigError(f"missing '{key}' in [{where}]")
    value = table[key]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ConfigError(f"'{key}' in [{where}] must be {kind.__name__}, got {type(value).__name__}")
    return value


def _positive(value, name):
    if not value > 0:
        raise ConfigError(f"'{name}' must be positive, got {value}")
    return value


def _build_system(table):
    n = _require(table, "n", int, "system")
    m = _require(table, "m", int, "system")
    if not 1 <= m <= n:
        raise ConfigError(f"need 1 <= m <= n, got n={n}, m={m}")
    states = _require(table, "states", list, "system")
    if len(states) != n:
        raise ConfigError(f"expected {n} state names, got {len(states)}")
    drift = _require(table, "drift", list, "system")
    if len(drift) != n:
        raise ConfigError(f"expected {n} drift expressions, got {len(drift)}")
    controls = _require(table, "controls", list, "system")
    if len(controls) != m:
        raise ConfigError(f"expected {m} control fields, got {len(controls)}")
    for j, column in enumerate(controls):
        if not isinstance(column, list) or len(column) != n:
            raise ConfigError(f"control field {j+1} must list {n} expressions")
    try:
        system = ControlAffineSystem.from_strings(states, drift, controls)
    except (ex.ExprError, ValueError) as exc:
        raise ConfigError(f"[system] expressions: {exc}") from exc

    strict = None
    if table.get("strict_feedback", False):
        if m != 1:
            raise ConfigError("strict_feedback requires m = 1")
        f_strs = table.get("f", None)
        g_strs = table.get("g", None)
        if f_strs is None or g_strs is None:
            raise ConfigError("strict_feedback = true requires 'f' and 'g' expression lists")
        try:
            strict = StrictFeedbackSystem.from_strings(states, f_strs, g_strs)
        except (ex.ExprError, ValueError) as exc:
            raise ConfigError(f"[system] strict-feedback check: {exc}") from exc
        _check_strict_matches_affine(strict, system)
    return system, strict


def _check_strict_matches_affine(strict, system):
    """The triangular f/g lists must reproduce the declared drift and controls."""
    converted = strict.to_control_affine()
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.uniform(-1.0, 1.0, system.n)
        f_declared = system.eval_drift(x)
        f_converted = converted.eval_drift(x)
        scale = max(1.0, float(np.linalg.norm(f_declared)))
        if np.linalg.norm(f_declared - f_converted) > 1e-9 * scale:
            raise ConfigError(
                "strict-feedback f/g lists do not reproduce the declared drift "
                f"(mismatch at x = {x})"
            )
        G_declared = system.control_matrix(x)
        G_converted = converted.control_matrix(x)
        g_scale = max(1.0, float(np.linalg.norm(G_declared)))
        if np.linalg.norm(G_declared - G_converted) > 1e-9 * g_scale:
            raise ConfigError(
                "strict-feedback f/g lists do not reproduce the declared control field "
                f"(mismatch at x = {x})"
            )


def _build_manifold(table, system):
    param = table.get("mu", None)
    if param is not None and not isinstance(param, str):
        raise ConfigError("'mu' in [manifold] must be the parameter name (a string)")
    if "levelset" in table:
        equations = _require(table, "levelset", list, "manifold")
        names = list(system.states) + ([param] if param else [])
        try:
            exprs = ex.parse_vector(equations, names)
        except ex.ExprError as exc:
            raise ConfigError(f"[manifold] levelset: {exc}") from exc
        if "ind" in table and "dep" in table:
            ind = [i - 1 for i in _require(table, "ind", list, "manifold")]
            dep = [i - 1 for i in _require(table, "dep", list, "manifold")]
            try:
                return LevelSetManifold(system.states, exprs, ind, dep, param=param)
            except ValueError as exc:
                raise ConfigError(f"[manifold] {exc}") from exc
        at = table.get("at", None)
        if at is None:
            raise ConfigError("[manifold] levelset needs either ind/dep lists or a reference point 'at'")
        try:
            return LevelSetManifold.from_point(system.states, exprs, at, param=param)
        except ValueError as exc:
            raise ConfigError(f"[manifold] {exc}") from exc

    ind_1 = _require(table, "ind", list, "manifold")
    dep_1 = _require(table, "dep", list, "manifold")
    for i in ind_1 + dep_1:
        if not isinstance(i, int) or not 1 <= i <= system.n:
            raise ConfigError(f"manifold index {i} outside 1..{system.n}")
    overlap = set(ind_1) & set(dep_1)
    if overlap:
        raise ConfigError(f"ind and dep overlap at index {sorted(overlap)[0]}")
    if sorted(ind_1 + dep_1) != list(range(1, system.n + 1)):
        missing = sorted(set(range(1, system.n + 1)) - set(ind_1) - set(dep_1))
        raise ConfigError(f"ind and dep must partition 1..{system.n}; missing {missing}")
    h = _require(table, "h", list, "manifold")
    ind = [i - 1 for i in ind_1]
    dep = [i - 1 for i in dep_1]
    try:
        return TransverseManifold.from_strings(system.states, ind, dep, h, param=param)
    except (ex.ExprError, ValueError) as exc:
        raise ConfigError(f"[manifold] {exc}") from exc


def _build_solver(table, n):
    solver = SolverConfig()
    if "tol" in table:
        solver.tol = _positive(_require(table, "tol", float, "solver"), "tol")
    if "rank_tol" in table:
        solver.rank_tol = _positive(_require(table, "rank_tol", float, "solver"), "rank_tol")
        if not solver.rank_tol < 1.0:
            raise ConfigError("rank_tol must be below 1")
    if "max_iter" in table:
        solver.max_iter = int(_positive(_require(table, "max_iter", int, "solver"), "max_iter"))
    if "arc_step" in table:
        solver.arc_step = _positive(_require(table, "arc_step", float, "solver"), "arc_step")
    if "n_continuation_steps" in table:
        solver.n_continuation_steps = int(
            _positive(_require(table, "n_continuation_steps", int, "solver"), "n_continuation_steps")
        )
    if "lambda" in table:
        solver.gain = _positive(_require(table, "lambda", float, "solver"), "lambda")
    if "rtol" in table:
        solver.rtol = _positive(_require(table, "rtol", float, "solver"), "rtol")
    if "atol" in table:
        solver.atol = _positive(_require(table, "atol", float, "solver"), "atol")
    if "t_final" in table:
        solver.t_final = _positive(_require(table, "t_final", float, "solver"), "t_final")
    if "n_report" in table:
        solver.n_report = int(_positive(_require(table, "n_report", int, "solver"), "n_report"))
    if "match_radius" in table:
        solver.match_radius = _positive(_require(table, "match_radius", float, "solver"), "match_radius")
    if "grid" in table:
        grid = _require(table, "grid", dict, "solver")
        box = _require(grid, "box", list, "solver.grid")
        if len(box) != n:
            raise ConfigError(f"grid box needs {n} axes, got {len(box)}")
        for axis in box:
            if not (isinstance(axis, list) and len(axis) == 2 and axis[1] > axis[0]):
                raise ConfigError(f"grid box axis {axis} must be [lo, hi] with hi > lo")
        solver.grid_box = [[float(lo), float(hi)] for lo, hi in box]
        step = grid.get("step", 0.5)
        steps = step if isinstance(step, list) else [step]
        for s in steps:
            _positive(float(s), "grid step")
        solver.grid_step = [float(s) for s in steps]
    if "x0" in table:
        x0 = _require(table, "x0", list, "solver")
        if len(x0) != n:
            raise ConfigError(f"x0 needs {n} components, got {len(x0)}")
        solver.x0 = [float(v) for v in x0]
    if "seeds" in table:
        seeds = _require(table, "seeds", list, "solver")
        for seed in seeds:
            if not (isinstance(seed, list) and len(seed) == n):
                raise ConfigError(f"each seed needs {n} components, got {seed}")
        solver.seeds = [[float(v) for v in seed] for seed in seeds]
    if "mu_range" in table:
        mu_range = _require(table, "mu_range", list, "solver")
        if len(mu_range) != 2 or not mu_range[1] > mu_range[0]:
            raise ConfigError("mu_range must be [lo, hi] with hi > lo")
        solver.mu_range = [float(v) for v in mu_range]
    if "n_mu" in table:
        solver.n_mu = int(_positive(_require(table, "n_mu", int, "solver"), "n_mu"))
    if "control_box" in table:
        bounds = _require(table, "control_box", list, "solver")
        if len(bounds) != 2:
            raise ConfigError("control_box must be [lower list, upper list]")
        solver.control_box = [[float(v) for v in bounds[0]], [float(v) for v in bounds[1]]]
    return solver


def load_config(path):
    """Parse and validate a TOML run configuration."""
    try:
        with open(path, "rb") as handle:
            raw = tomllib.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file is not valid TOML: {exc}") from exc

    known = {"system", "manifold", "solver", "output"}
    ignored = sorted(set(raw) - known)
    warnings_list = [f"ignoring unknown block [{name}]" for name in ignored]

    if "system" not in raw:
        raise ConfigError("missing [system] block")
    system, strict = _build_system(raw["system"])
    manifold = _build_manifold(raw["manifold"], system) if "manifold" in raw else None
    solver = _build_solver(raw.get("solver", {}), system.n)
    output_dir = raw.get("output", {}).get("dir", "out")
    return RunConfig(
        system=system,
        strict=strict,
        linear=None,
        manifold=manifold,
        solver=solver,
        output_dir=output_dir,
        warnings=warnings_list,
    )
