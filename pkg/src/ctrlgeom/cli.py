"""Command-line front end.

Subcommands bind a TOML config to the pipeline and write machine-readable
reports (CSV + JSON, fixed 17-significant-digit float formatting, fixed row
ordering, so identical inputs give byte-identical outputs) plus rendered
PNG figures alongside:

    check      validate the config and exit
    stratify   corank labels over the sampling grid
    sigma      singular set (curve / cloud / graph) + dimension certificate
    transverse transversality margins + equilibria of the induced dynamics
    design     invariance feedback + closed-loop trajectory
    bifurcate  equilibrium branches over the manifold family + events

Exit codes: 0 success, 1 validation/usage error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import design as dn
from . import sigma as sg
from . import sysmodel as sm
from . import transverse as tv
from .config import ConfigError, load_config
from .expr import EvaluationError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


class _Parser(argparse.ArgumentParser):
    """Argument parser that exits with code 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _format_float(value):
    return f"{value:.17g}"


def _json_fragment(obj):
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _format_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_fixed(obj, indent=0):
    """Deterministic JSON with fixed float formatting (17 significant digits)."""
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        parts = [
            f"{inner}{json.dumps(str(key))}: {dumps_fixed(value, indent + 1)}"
            for key, value in obj.items()
        ]
        return "{\n" + ",\n".join(parts) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)) or isinstance(obj, np.ndarray):
        items = list(obj)
        if not items:
            return "[]"
        parts = [f"{inner}{dumps_fixed(item, indent + 1)}" for item in items]
        return "[\n" + ",\n".join(parts) + "\n" + pad + "]"
    return _json_fragment(obj)


def write_json(path, obj):
    Path(path).write_text(dumps_fixed(obj) + "\n")


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for value in row:
            if isinstance(value, (float, np.floating)):
                cells.append(_format_float(float(value)))
            elif isinstance(value, (int, np.integer)):
                cells.append(str(int(value)))
            else:
                cells.append(str(value))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def _report_header(command, solver):
    return {"command": command, "solver": solver.effective()}


def _parse_grid_flag(values, n):
    axes = []
    for text in values:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"--grid expects MIN:MAX:STEP, got '{text}'")
        try:
            lo, hi, step = (float(p) for p in parts)
        except ValueError as exc:
            raise ConfigError(f"--grid expects numbers, got '{text}'") from exc
        if not hi > lo or not step > 0:
            raise ConfigError(f"--grid needs MAX > MIN and STEP > 0, got '{text}'")
        axes.append((lo, hi, step))
    if len(axes) == 1 and n > 1:
        axes = axes * n
    if len(axes) != n:
        raise ConfigError(f"--grid given for {len(axes)} axes, system has {n}")
    return [[lo, hi] for lo, hi, _ in axes], [step for _, _, step in axes]


def _parse_mu_range_flag(text):
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"--mu-range expects A:B:N, got '{text}'")
    try:
        lo, hi = float(parts[0]), float(parts[1])
        count = int(parts[2])
    except ValueError as exc:
        raise ConfigError("--mu-range expects A:B:N with numeric A, B, N") from exc
    if not hi > lo or count < 2:
        raise ConfigError("--mu-range needs B > A and N >= 2")
    return [lo, hi], count


def _apply_overrides(cfg, args):
    solver = cfg.solver
    if args.tol is not None:
        solver.tol = args.tol
    if args.rank_tol is not None:
        solver.rank_tol = args.rank_tol
    if args.max_iter is not None:
        solver.max_iter = args.max_iter
    if args.arc_step is not None:
        solver.arc_step = args.arc_step
    if args.gain is not None:
        solver.gain = args.gain
    if args.rtol is not None:
        solver.rtol = args.rtol
    if args.atol is not None:
        solver.atol = args.atol
    if args.t_final is not None:
        solver.t_final = args.t_final
    if args.n_report is not None:
        solver.n_report = args.n_report
    if args.n_steps is not None:
        solver.n_continuation_steps = args.n_steps
    if args.match_radius is not None:
        solver.match_radius = args.match_radius
    if args.grid:
        solver.grid_box, solver.grid_step = _parse_grid_flag(args.grid, cfg.system.n)
    if args.mu_range is not None:
        solver.mu_range, solver.n_mu = _parse_mu_range_flag(args.mu_range)
    if args.seed_grid:
        solver.seed_grid = True
    if args.out is not None:
        cfg.output_dir = args.out


def _seeds(cfg):
    solver = cfg.solver
    if solver.seeds is not None and not solver.seed_grid:
        return [np.asarray(s) for s in solver.seeds]
    points = sm.grid_points(solver.grid_box, _step_vector(solver), max_points=100_000)
    return list(points)


def _step_vector(solver):
    steps = solver.grid_step
    return steps[0] if len(steps) == 1 else steps


def _warn_unused(cfg, used, quiet):
    messages = list(cfg.warnings)
    if "manifold" not in used and cfg.manifold is not None:
        messages.append("ignoring [manifold] block (not used by this subcommand)")
    for message in messages:
        if not quiet:
            print(f"warning: {message}", file=sys.stderr)


def _cmd_check(cfg, args, out):
    _warn_unused(cfg, {"system", "manifold", "solver", "output"}, args.quiet)
    if not args.quiet:
        print("config OK")
    return EXIT_OK


def _cmd_stratify(cfg, args, out):
    _warn_unused(cfg, {"system", "solver", "output"}, args.quiet)
    solver = cfg.solver
    strat = sm.stratify(
        cfg.system, solver.grid_box, _step_vector(solver), rank_tol=solver.rank_tol
    )
    header = list(cfg.system.states) + ["corank"]
    rows = [list(p) + [int(c)] for p, c in zip(strat.points, strat.coranks)]
    write_csv(out / "stratify.csv", header, rows)
    counts = {str(k): int(np.sum(strat.coranks == k)) for k in range(cfg.system.m + 1)}
    report = _report_header("stratify", solver)
    report["regular_fraction"] = strat.regular_fraction
    report["corank_counts"] = counts
    write_json(out / "stratify.json", report)
    if not args.no_plot:
        from . import plots

        plots.save_stratification_figure(strat, cfg.system.states, out / "stratify.png")
    if not args.quiet:
        print(f"stratify: {len(strat.points)} samples, regular fraction {strat.regular_fraction:.6f}")
    return EXIT_OK


def _sigma_certificate(system, points, rank_tol):
    expected = system.n - system.m
    ranks = [sg.residual_rank(system, p, rank_tol) for p in points]
    non_generic = sum(1 for r in ranks if r != expected)
    certified = non_generic == 0 and len(points) > 0
    return {
        "dimension": system.m if certified else None,
        "certified": certified,
        "points_checked": len(points),
        "non_generic_points": non_generic,
        "note": None if certified else "non-generic configuration",
    }


def _cmd_sigma(cfg, args, out):
    _warn_unused(cfg, {"system", "solver", "output"}, args.quiet)
    solver = cfg.solver
    system = cfg.system
    step = _step_vector(solver)
    if cfg.strict is not None:
        lo, hi = solver.grid_box[0]
        h = solver.grid_step[0]
        count = int(round((hi - lo) / h)) + 1
        samples = np.linspace(lo, lo + (count - 1) * h, count)
        result = sg.sigma_strict_feedback(cfg.strict, samples, tol=solver.tol, rank_tol=solver.rank_tol)
        system = cfg.strict.to_control_affine()
    else:
        cloud = sg.sigma_grid_scan(
            system, solver.grid_box, step,
            tol=solver.tol, rank_tol=solver.rank_tol, max_iter=solver.max_iter,
        )
        result = cloud
        if system.m == 1 and len(cloud) and not cloud.degenerate:
            center = np.array([(lo + hi) / 2.0 for lo, hi in solver.grid_box])
            start = cloud.points[int(np.argmin(np.linalg.norm(cloud.points - center, axis=1)))]
            arc = solver.arc_step if solver.arc_step is not None else solver.default_arc_step()
            steps = solver.n_continuation_steps
            try:
                forward = sg.sigma_continuation(
                    system, start, arc, steps,
                    tol=solver.tol, rank_tol=solver.rank_tol, direction=+1,
                )
                backward = sg.sigma_continuation(
                    system, start, arc, steps,
                    tol=solver.tol, rank_tol=solver.rank_tol, direction=-1,
                )
                points = np.vstack([backward.points[::-1], forward.points[1:]])
                norms = np.concatenate([backward.residual_norms[::-1], forward.residual_norms[1:]])
                result = sg.SigmaSet(
                    kind="curve", tol=solver.tol, points=points, residual_norms=norms,
                    stop_reason=f"backward: {backward.stop_reason}; forward: {forward.stop_reason}",
                )
            except ValueError:
                result = cloud  # fall back to the scan cloud
    bad_rows = result.points is None or len(result) == 0
    header = list(system.states) + ["residual_norm"]
    rows = []
    if not bad_rows:
        rows = [list(p) + [float(r)] for p, r in zip(result.points, result.residual_norms)]
    write_csv(out / "sigma.csv", header, rows)
    report = _report_header("sigma", solver)
    report["kind"] = result.kind
    report["count"] = 0 if bad_rows else len(result)
    report["degenerate"] = result.degenerate
    if result.stop_reason is not None:
        report["stop_reason"] = result.stop_reason
    if result.basis is not None:
        report["basis"] = [list(col) for col in result.basis.T]
    certificate = _sigma_certificate(
        system, [] if bad_rows else list(result.points), solver.rank_tol
    )
    report["certificate"] = certificate
    write_json(out / "sigma.json", report)
    if not args.no_plot:
        from . import plots

        plots.save_sigma_figure(result, system.states, out / "sigma.png")
    if not args.quiet:
        print(f"sigma: {result.kind} with {report['count']} points")
    if result.kind == "cloud" and result.failures and not args.quiet:
        print(f"sigma: {result.failures} seeds failed", file=sys.stderr)
    return EXIT_OK if not bad_rows else EXIT_NUMERICAL


def _require_manifold(cfg, parametrized):
    if cfg.manifold is None:
        raise ConfigError("this subcommand needs a [manifold] block")
    if parametrized and cfg.manifold.param is None:
        raise ConfigError("bifurcate needs a parametrized manifold: set mu = \"name\" in [manifold]")
    if not parametrized and cfg.manifold.param is not None:
        raise ConfigError(
            "manifold has a free parameter; use the bifurcate subcommand or bind mu"
        )


def _eig_pairs(record):
    return [[float(v.real), float(v.imag)] for v in record.eigenvalues]


def _cmd_transverse(cfg, args, out):
    _require_manifold(cfg, parametrized=False)
    _warn_unused(cfg, {"system", "manifold", "solver", "output"}, args.quiet)
    solver = cfg.solver
    W = cfg.manifold
    system = cfg.system
    records = tv.find_equilibria(
        W, system, _seeds(cfg),
        tol=solver.tol, rank_tol=solver.rank_tol, max_iter=solver.max_iter,
    )
    records.sort(key=lambda r: tuple(r.chart_point))
    rows = []
    entries = []
    for record in records:
        to_d = tv.transversality_to_D(W, system, record.point, on_tol=1e-6)
        to_sigma = tv.transversality_to_sigma(W, system, record)
        rows.append(
            list(record.point)
            + [float(np.max(record.eigenvalues.real)), record.index,
               int(record.isolated), to_d.margin, to_sigma.margin]
        )
        entries.append(
            {
                "point": list(record.point),
                "chart_point": list(record.chart_point),
                "eigenvalues": _eig_pairs(record),
                "index": record.index,
                "isolated": record.isolated,
                "margin_to_distribution": to_d.margin,
                "margin_to_singular_set": to_sigma.margin,
            }
        )
    header = list(system.states) + [
        "leading_re", "index", "isolated", "margin_D", "margin_sigma",
    ]
    write_csv(out / "transverse.csv", header, rows)
    report = _report_header("transverse", solver)
    report["equilibria"] = entries
    write_json(out / "equilibria.json", report)
    if not args.no_plot:
        from . import plots

        plots.save_equilibria_figure(records, system.states, out / "transverse.png")
    if not args.quiet:
        print(f"transverse: {len(records)} equilibria")
    return EXIT_OK


def _cmd_design(cfg, args, out):
    _require_manifold(cfg, parametrized=False)
    _warn_unused(cfg, {"system", "manifold", "solver", "output"}, args.quiet)
    solver = cfg.solver
    if solver.x0 is None:
        raise ConfigError("design needs x0 in the [solver] block")
    law = dn.synthesize_invariance_feedback(
        cfg.manifold, cfg.system, solver.gain,
        control_box=solver.control_box,
    )
    traj = dn.simulate(
        law, solver.x0, solver.t_final,
        rtol=solver.rtol, atol=solver.atol, n_report=solver.n_report,
    )
    header = ["t"] + list(cfg.system.states) + [
        f"u{j+1}" for j in range(cfg.system.m)
    ] + ["s_norm"]
    rows = [
        [t] + list(x) + list(u) + [s]
        for t, x, u, s in zip(traj.t, traj.states, traj.controls, traj.s_norm)
    ]
    write_csv(out / "trajectory.csv", header, rows)
    report = _report_header("design", solver)
    report["gain"] = law.gain
    report["x0"] = solver.x0
    report["complete"] = traj.complete
    report["diagnostic"] = traj.diagnostic
    report["initial_distance"] = float(traj.s_norm[0]) if len(traj.s_norm) else None
    report["final_distance"] = float(traj.s_norm[-1]) if len(traj.s_norm) else None
    report["bound_violations"] = [
        {"t": t, "input": j + 1, "value": v} for t, j, v in traj.bound_violations
    ]
    write_json(out / "design.json", report)
    if not args.no_plot:
        from . import plots

        plots.save_trajectory_figure(traj, cfg.system.states, out / "trajectory.png")
    if not args.quiet:
        print(f"design: {'complete' if traj.complete else 'TRUNCATED'}, "
              f"final |s| = {report['final_distance']:.3e}")
    return EXIT_OK if traj.complete else EXIT_NUMERICAL


def _cmd_bifurcate(cfg, args, out):
    _require_manifold(cfg, parametrized=True)
    _warn_unused(cfg, {"system", "manifold", "solver", "output"}, args.quiet)
    solver = cfg.solver
    mu_values = np.linspace(solver.mu_range[0], solver.mu_range[1], solver.n_mu)
    diagram = dn.trace_bifurcation(
        cfg.manifold, cfg.system, mu_values, _seeds(cfg),
        tol=solver.tol, rank_tol=solver.rank_tol, match_radius=solver.match_radius,
    )
    header = ["mu", "branch"] + [
        cfg.system.states[i] for i in cfg.manifold.ind
    ] + ["leading_re", "idx", "isolated"]
    rows = []
    for b, branch in enumerate(diagram.branches):
        for k, record in zip(branch.mu_indices, branch.records):
            rows.append(
                [float(diagram.mu[k]), b]
                + list(record.chart_point)
                + [float(np.max(record.eigenvalues.real)), record.index, int(record.isolated)]
            )
    rows.sort(key=lambda row: (row[0], row[1]))
    write_csv(out / "diagram.csv", header, rows)
    report = _report_header("bifurcate", solver)
    report["events"] = [
        {"mu": e.mu, "type": e.kind, "point": list(e.point), "eigenvalue": e.eigenvalue}
        for e in diagram.events
    ]
    report["diagnostics"] = diagram.diagnostics
    write_json(out / "events.json", report)
    if not args.no_plot:
        from . import plots

        plots.save_bifurcation_figure(diagram, out / "bifurcation.png")
    if not args.quiet:
        print(
            f"bifurcate: {len(diagram.branches)} branches, "
            f"{len(diagram.events)} events "
            f"({', '.join(e.kind for e in diagram.events) or 'none'})"
        )
    return EXIT_OK


_COMMANDS = {
    "check": _cmd_check,
    "stratify": _cmd_stratify,
    "sigma": _cmd_sigma,
    "transverse": _cmd_transverse,
    "design": _cmd_design,
    "bifurcate": _cmd_bifurcate,
}


def build_parser():
    parser = _Parser(prog="ctrlgeom", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML configuration file")
        p.add_argument("--out", default=None, help="output directory (default: config [output] dir)")
        p.add_argument("--tol", type=float, default=None, help="residual tolerance")
        p.add_argument("--rank-tol", dest="rank_tol", type=float, default=None,
                       help="relative rank threshold")
        p.add_argument("--max-iter", dest="max_iter", type=int, default=None)
        p.add_argument("--arc-step", dest="arc_step", type=float, default=None,
                       help="continuation arc length step")
        p.add_argument("--n-steps", dest="n_steps", type=int, default=None,
                       help="continuation steps per direction")
        p.add_argument("--lambda", dest="gain", type=float, default=None,
                       help="invariance feedback gain")
        p.add_argument("--rtol", type=float, default=None, help="integrator relative tolerance")
        p.add_argument("--atol", type=float, default=None, help="integrator absolute tolerance")
        p.add_argument("--t-final", dest="t_final", type=float, default=None)
        p.add_argument("--n-report", dest="n_report", type=int, default=None)
        p.add_argument("--mu-range", dest="mu_range", default=None, metavar="A:B:N",
                       help="parameter sweep: N samples over [A, B]")
        p.add_argument("--grid", action="append", default=None, metavar="MIN:MAX:STEP",
                       help="sampling grid, one flag per axis (or one for all)")
        p.add_argument("--match-radius", dest="match_radius", type=float, default=None,
                       help="branch matching radius for bifurcate")
        p.add_argument("--seed-grid", dest="seed_grid", action="store_true",
                       help="seed solvers from the sampling grid even if seeds are configured")
        p.add_argument("--no-plot", dest="no_plot", action="store_true",
                       help="skip figure rendering")
        p.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_VALIDATION
    try:
        cfg = load_config(args.config)
        _apply_overrides(cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    out = Path(cfg.output_dir)
    if args.command != "check":
        out.mkdir(parents=True, exist_ok=True)
    try:
        return _COMMANDS[args.command](cfg, args, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (sg.NewtonFailure, sg.StratumError, tv.TransversalityError,
            tv.NotOnManifoldError, EvaluationError, sm.GridSizeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
