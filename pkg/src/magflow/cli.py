"""
``magflow`` command line: subcommands, run directories and exit codes.

Exit codes: 0 success, 2 invalid input, 3 non-convergence (partial results
are still written).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io
from . import loops as lp
from . import search
from .config import RunConfig, load_config
from .dynamics import PhaseState, closure_defect, integrate_orbit
from .errors import (BracketError, ConfigError, DegeneracyError, DomainError, GeometryError,
                     MagflowError, PreconditionError)
from .index import index_report, iterated_nullity_partition
from .symplectic import (classify, hyperbolic_perturbation, invariant_lagrangian,
                         symplectic_residual)

log = logging.getLogger("magflow")

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 2, 3
COMMANDS = ("integrate", "find-min", "minimax", "sweep", "estimate-cu", "index", "perturb",
            "catalog")


class RunDir:
    """``run.json``, ``loops/*.json`` and ``plots/*.svg`` under one directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def loop(self, name: str, loop: lp.DiscreteLoop, extra: dict | None = None) -> str:
        record = lp.loop_to_record(loop)
        if extra:
            record.update(extra)
        io.write_json(self.root / "loops" / f"{name}.json", record)
        return f"loops/{name}.json"

    def plot(self, name: str, svg: str) -> str:
        io.write_text(self.root / "plots" / f"{name}.svg", svg)
        return f"plots/{name}.svg"

    def csv(self, name: str, traj) -> str:
        io.write_trajectory_csv(self.root / f"{name}.csv", traj)
        return f"{name}.csv"

    def finish(self, command: str, cfg: RunConfig | None, results: dict, status: int) -> None:
        doc = {
            "magflow_version": __version__,
            "command": command,
            "config": _config_record(cfg),
            "results": results,
            "status": {EXIT_OK: "ok", EXIT_NONCONVERGED: "not_converged"}.get(status, "error"),
        }
        io.write_json(self.root / "run.json", doc)


def _config_record(cfg: RunConfig | None):
    if cfg is None:
        return None
    return {
        "system": cfg.system_spec,
        "discretization": cfg.discretization,
        "parameters": cfg.parameters,
        "seed": cfg.seed,
    }


# helpers ------------------------------------------------------------------------

def resolve_jobs(flag) -> int:
    """``--jobs`` if given, else ``MAGFLOW_JOBS``, else 1."""
    raw = flag if flag is not None else os.environ.get("MAGFLOW_JOBS")
    if raw is None or raw == "":
        return 1
    try:
        jobs = int(raw)
    except ValueError:
        raise ConfigError(f"jobs must be a positive integer, got {raw!r}") from None
    if jobs < 1:
        raise ConfigError(f"jobs must be a positive integer, got {raw!r}")
    return jobs


def _with_floor(loop: lp.DiscreteLoop, cfg: RunConfig) -> lp.DiscreteLoop:
    return lp.DiscreteLoop(loop.nodes, loop.period, loop.winding, cfg.disc("t_floor"))


def _seeds(cfg: RunConfig, system, kappa: float, rng: np.random.Generator) -> list:
    N = cfg.disc("N")
    specs = cfg.parameters.get("seeds")
    if specs is None:
        specs = ([{"type": "line", "x1": 0.5, "winding": [0, 1]}] if system.is_torus
                 else [{"type": "circle", "center": [0.0, 0.0], "radius": 1.0}])
    if not isinstance(specs, list) or not specs:
        raise cfg.error("parameters", "seeds", "must be a nonempty list of loop tables")
    out = []
    for spec in specs:
        if isinstance(spec, dict) and spec.get("type") == "random_circle":
            count = spec.get("count", 1)
            if not isinstance(count, int) or count < 1:
                raise cfg.error("parameters", "seeds", "random_circle needs a positive count")
            for _ in range(count):
                c = rng.random(2) if system.is_torus else rng.normal(size=2)
                r = float(spec.get("radius", 0.1 + 0.3 * rng.random()))
                out.append(lp.circle_loop(c, r, 2 * np.pi * r / np.sqrt(2 * kappa), N,
                                          clockwise=bool(rng.random() < 0.5)))
            continue
        out.append(cfg.loop_from_spec(spec, "seeds", kappa, system, N))
    return [_with_floor(s, cfg) for s in out]


def _target(cfg: RunConfig, system, kappa: float):
    spec = cfg.parameters.get("target", {"type": "detour"})
    return _with_floor(cfg.loop_from_spec(spec, "target", kappa, system, cfg.disc("N")), cfg)


def _loop_curve(loop: lp.DiscreteLoop) -> np.ndarray:
    return loop.closed_nodes()


def _orbit_svg(curves: dict, system, title: str) -> str:
    return io.orbit_plot({k: _loop_curve(v) for k, v in curves.items()},
                         torus=system.is_torus, title=title)


def _minimizer_record(res, name, run: RunDir, with_report=True) -> dict:
    rec = {
        "action": res.action,
        "gradient_norm": res.gradient_norm,
        "iterations": res.iterations,
        "converged": res.converged,
        "negative": res.negative,
        "ps_failure": res.ps_failure,
        "period": res.loop.period,
        "loop": run.loop(name, res.loop,
                         {"index": res.report.to_dict()} if res.report and with_report else None),
    }
    if res.report is not None:
        rec["index"] = res.report.to_dict()
    return rec


# commands -------------------------------------------------------------------------

def cmd_integrate(args, cfg: RunConfig, run: RunDir, jobs: int):
    system = cfg.build_system()
    x0 = cfg.vector("x0")
    v0 = cfg.vector("v0")
    T = float(args.T) if args.T is not None else cfg.positive("T")
    if not T > 0:
        raise ConfigError("--T must be positive")
    steps = cfg.disc("steps")
    traj = integrate_orbit(system, PhaseState(x0, v0), T, steps)
    pos, vel, winding = closure_defect(system, traj)
    csv_name = run.csv("trajectory", traj)
    plot = run.plot("orbit", io.orbit_plot({"orbit": traj.x}, torus=system.is_torus,
                                           title=f"orbit over T = {T:g}"))
    results = {
        "T": T,
        "steps": steps,
        "energy": float(traj.energy[0]),
        "max_energy_drift": traj.max_energy_drift,
        "closure_position": pos,
        "closure_velocity": vel,
        "winding": winding,
        "end": {"x": traj.x[-1], "v": traj.v[-1]},
        "files": {"trajectory": csv_name, "plot": plot},
    }
    return results, EXIT_OK


def _find_all(cfg, system, kappa, seeds, run, jobs, prefix="minimizer"):
    records, results = [], []
    for j, seed in enumerate(seeds):
        res = search.find_minimizer(system, kappa, seed, crit_tol=cfg.disc("crit_tol"),
                                    max_iter=cfg.disc("max_iter"),
                                    bott_grid=cfg.disc("bott_grid"), jobs=jobs)
        records.append(_minimizer_record(res, f"{prefix}_{j}", run))
        results.append(res)
    return records, results


def cmd_find_min(args, cfg, run, jobs):
    system = cfg.build_system()
    kappa = float(args.kappa) if args.kappa is not None else cfg.positive("kappa")
    rng = np.random.default_rng(cfg.seed)
    seeds = _seeds(cfg, system, kappa, rng)
    records, results = _find_all(cfg, system, kappa, seeds, run, jobs)
    ok = [r for r in results if r.converged]
    curves = {f"minimizer {j}": r.loop for j, r in enumerate(results) if r.converged}
    plot = run.plot("minimizers", _orbit_svg(curves or {"seed": seeds[0]}, system,
                                             f"minimizers at kappa = {kappa:g}"))
    status = EXIT_OK if len(ok) == len(results) else EXIT_NONCONVERGED
    return {"kappa": kappa, "minimizers": records, "files": {"plot": plot}}, status


def _start_set(cfg, system, kappa, rng, run, jobs):
    seeds = _seeds(cfg, system, kappa, rng)
    records, results = _find_all(cfg, system, kappa, seeds, run, jobs)
    starts = []
    for r in results:
        if r.converged and not any(lp.circle_distance(r.loop, q) < cfg.disc("dedup_tol")
                                   for q in starts):
            starts.append(r.loop)
    return starts, records


def _minimax_one(cfg, system, kappa, n, starts, target, run):
    problem = search.MinimaxProblem(system, kappa, n, starts, target, K=cfg.disc("K"))
    res = search.minimax(problem, tear_tol=cfg.disc("tear_tol"))
    out = {}
    extra = report = None
    if res.gradient_norm < 1e-3:
        try:
            report = index_report(system, kappa, res.argmax, grid=cfg.disc("bott_grid"),
                                  with_monodromy=False, crit_tol=1e-3)
            extra = {"index": report.to_dict()}
        except PreconditionError as exc:
            out["index_error"] = str(exc)
    out.update({
        "n": n,
        "value": res.value,
        "target_action": n * lp.action(system, kappa, target),
        "argmax_index": res.argmax_index,
        "gradient_norm": res.gradient_norm,
        "iterations": res.iterations,
        "converged": res.converged,
        "torn": res.torn,
        "polished": res.polished,
        "ps_warning": res.ps_warning,
        "path_actions": res.actions,
        "argmax": run.loop(f"argmax_n{n}", res.argmax, extra),
        "index": report.to_dict() if report else None,
    })
    return out, res


def cmd_minimax(args, cfg, run, jobs):
    system = cfg.build_system()
    kappa = float(args.kappa) if args.kappa is not None else cfg.positive("kappa")
    ns = [int(args.n)] if args.n is not None else cfg.orders()
    if ns[0] < 1:
        raise ConfigError("--n must be a positive integer")
    rng = np.random.default_rng(cfg.seed)
    starts, records = _start_set(cfg, system, kappa, rng, run, jobs)
    results = {"kappa": kappa, "minimizers": records}
    if not starts:
        results["error"] = "no converged minimizer to start the paths from"
        return results, EXIT_NONCONVERGED
    target = _target(cfg, system, kappa)
    results["target"] = run.loop("target", target)
    runs, raw = [], []
    for n in ns:
        rec, res = _minimax_one(cfg, system, kappa, n, starts, target, run)
        runs.append(rec)
        raw.append(res)
    results["runs"] = runs
    results["files"] = {
        "actions": run.plot("path_actions", io.line_plot(
            {f"n = {n}": (list(range(len(r.actions))), list(r.actions)) for n, r in zip(ns, raw)},
            "action along the path", "path loop", "action")),
        "orbits": run.plot("argmax", _orbit_svg(
            {"start": starts[0], **{f"argmax n = {n}": r.argmax for n, r in zip(ns, raw)}},
            system, f"mountain passes at kappa = {kappa:g}")),
    }
    ok = all(r.converged and not r.torn for r in raw)
    return results, EXIT_OK if ok else EXIT_NONCONVERGED


def cmd_sweep(args, cfg, run, jobs):
    system = cfg.build_system()
    kappas = cfg.kappa_grid()
    ns = cfg.orders()
    rng = np.random.default_rng(cfg.seed)
    seed_sets = {k: _seeds(cfg, system, k, rng) for k in kappas}
    target = _target(cfg, system, kappas[-1])
    sw = search.sweep_kappa(system, kappas, ns, lambda k: seed_sets[k], target,
                            K=cfg.disc("K"), jobs=jobs, dedup_tol=cfg.disc("dedup_tol"),
                            max_iter=cfg.disc("max_iter"),
                            minimax_options={"tear_tol": cfg.disc("tear_tol")})
    run.loop("target", target)
    minimizers = []
    cat_loops, cat_labels = [], []
    for i, rec in enumerate(sw.minimizers):
        files = []
        for j, q in enumerate(rec.loops):
            files.append(run.loop(f"minimizer_k{i}_{j}", q))
            cat_loops.append(q)
            cat_labels.append("minimizer")
        minimizers.append({"kappa": rec.kappa, "actions": rec.actions, "converged": rec.converged,
                           "ps_failures": rec.ps_failures, "loops": files})
    cells = []
    crit_tol = cfg.disc("crit_tol")
    for (i, n), c in sorted(sw.cells.items()):
        name = run.loop(f"argmax_k{i}_n{n}", c.argmax)
        if c.argmax_gradient_norm < crit_tol:
            cat_loops.append(c.argmax)
            cat_labels.append("minimax")
        cells.append({
            "kappa": c.kappa, "n": n, "value": c.value, "relaxed_value": c.relaxed_value,
            "source": c.source, "converged": c.converged, "torn": c.torn,
            "polished": c.polished, "ps_warning": c.ps_warning,
            "argmax_gradient_norm": c.argmax_gradient_norm, "argmax": name,
        })
    cat = search.critical_circle_catalog(cat_loops, cat_labels, cfg.disc("dedup_tol"))
    columns = {str(n): sw.values(n) for n in ns}
    results = {
        "kappas": kappas,
        "n": ns,
        "c": columns,
        "target_actions": sw.target_actions,
        "minimizers": minimizers,
        "cells": cells,
        "monotonicity_violations": sw.monotonicity_violations(),
        "decreasing_in_n": sw.decreasing_in_n(),
        "target_margin_min": float(sw.target_margins().min()) if sw.cells else None,
        "flagged": sw.flagged,
        "catalog": _catalog_record(cat, cat_labels),
    }
    series = {f"c_{n}": (kappas, list(sw.values(n))) for n in ns}
    series["S(mu)"] = (kappas, sw.target_actions)
    results["files"] = {
        "values": run.plot("c_n_vs_kappa", io.line_plot(series, "mountain-pass values",
                                                        "kappa", "action")),
        "orbits": run.plot("orbits", _orbit_svg(
            {**{f"minimizer k{i}": r.best for i, r in enumerate(sw.minimizers)
                if r.loops and i in (0, len(kappas) - 1)},
             **{f"argmax n{n}": sw.cells[len(kappas) - 1, n].argmax for n in ns
                if (len(kappas) - 1, n) in sw.cells}},
            system, "minimizers and mountain passes")),
    }
    missing = any(not r.loops for r in sw.minimizers)
    status = EXIT_NONCONVERGED if (sw.flagged or missing) else EXIT_OK
    return results, status


def _catalog_record(cat, labels) -> dict:
    return {
        "distinct": cat.distinct,
        "orbits": [{"period": o.representative.period, "members": o.members,
                    "labels": sorted({labels[i] for i in o.members}),
                    "prime": o.prime, "order": o.order} for o in cat.orbits],
        "relations": [list(r) for r in cat.relations],
        "suspects": cat.suspects,
        "dedup_tol": cat.dedup_tol,
    }


def cmd_estimate_cu(args, cfg, run, jobs):
    system = cfg.build_system()
    lo, hi = cfg.bracket()
    steps = cfg.integer("bisection_steps", default=8)
    seeds = search.contractible_seeds()
    extra = cfg.integer("random_seeds", default=0) if cfg.has("random_seeds") else 0
    rng = np.random.default_rng(cfg.seed)
    for _ in range(extra):
        r = 0.05 + 0.4 * rng.random()
        seeds.append(lp.circle_loop(rng.random(2), r, 1.0, 64, clockwise=bool(rng.random() < 0.5)))
    est = search.estimate_cu(system, lo, hi, steps, seeds=seeds,
                             neg_margin=cfg.disc("neg_margin"), jobs=jobs)
    results = {"lo": est.lo, "hi": est.hi, "estimate": est.estimate, "width": est.width,
               "steps": est.steps, "decisions": [[k, b] for k, b in est.decisions],
               "seeds": len(seeds)}
    return results, EXIT_OK


def _loop_param(cfg: RunConfig, system, kappa):
    spec = cfg.require("loop")
    return _with_floor(cfg.loop_from_spec(spec, "loop", kappa, system, cfg.disc("N")), cfg)


def cmd_index(args, cfg, run, jobs):
    system = cfg.build_system()
    kappa = float(args.kappa) if args.kappa is not None else cfg.positive("kappa")
    if args.loop:
        loop = lp.loop_from_record(io.read_json(args.loop))
    else:
        loop = _loop_param(cfg, system, kappa)
    rep = index_report(system, kappa, loop, grid=cfg.disc("bott_grid"), jobs=jobs,
                       crit_tol=cfg.disc("crit_tol"), steps=cfg.disc("steps"))
    record = rep.to_dict()
    run.loop("loop", loop, {"index": record})
    angles = sorted(rep.bott_samples)
    plot = run.plot("bott", io.line_plot(
        {"Bott function": (angles, [rep.bott_samples[a] for a in angles])},
        "Bott function on the circle", "angle", "index"))
    return {"kappa": kappa, "index": record, "monodromy_residual": rep.monodromy_residual,
            "files": {"plot": plot}}, EXIT_OK


def cmd_perturb(args, cfg, run, jobs):
    if args.matrix is None:
        if cfg is None or not cfg.has("matrix"):
            raise ConfigError("perturb needs --matrix or parameters.matrix")
        base = Path(cfg.source).parent if cfg.source else Path(".")
        path = base / cfg.parameters["matrix"]
    else:
        path = Path(args.matrix)
    P = io.read_matrix(path)
    if args.t is not None:
        t = float(args.t)
    elif cfg is not None and cfg.has("t"):
        t = cfg.positive("t")
    else:
        raise ConfigError("perturb needs --t or parameters.t")
    kind = classify(P)
    results = {
        "matrix": P,
        "symplectic_residual": symplectic_residual(P),
        "unipotent": kind.unipotent,
        "hyperbolic": kind.hyperbolic,
        "spectrum": [[float(np.real(z)), float(np.imag(z))] for z in kind.eigenvalues],
        "t": t,
    }
    if not kind.unipotent:
        results["error"] = "matrix is not unipotent"
        return results, EXIT_INVALID
    try:
        V = invariant_lagrangian(P)
        Pt = hyperbolic_perturbation(P, t)
    except DegeneracyError as exc:
        results["error"] = str(exc)
        return results, EXIT_NONCONVERGED
    kt = classify(Pt)
    results.update({
        "lagrangian_basis": V,
        "P_t": Pt,
        "P_t_symplectic_residual": symplectic_residual(Pt),
        "P_t_hyperbolic": kt.hyperbolic,
        "P_t_spectrum": [[float(np.real(z)), float(np.imag(z))] for z in kt.eigenvalues],
        "distance": float(np.linalg.norm(Pt - P)),
    })
    if len(P) == 2 or len(P) == 4:
        part = iterated_nullity_partition(P, 12)
        results["iterated_nullity"] = {str(n): part.nu(n) for n in range(1, 13)}
    io.write_json(run.root / "P_t.json", {"matrix": Pt})
    return results, EXIT_OK


def cmd_catalog(args, cfg, run, jobs):
    paths = list(args.loops or [])
    if not paths and cfg is not None and cfg.has("loops"):
        base = Path(cfg.source).parent if cfg.source else Path(".")
        paths = [str(base / p) for p in cfg.parameters["loops"]]
    if not paths:
        raise ConfigError("catalog needs --loops files or parameters.loops")
    loops, labels = [], []
    for p in paths:
        rec = io.read_json(p)
        loops.append(lp.loop_from_record(rec))
        labels.append("minimax" if Path(p).name.startswith("argmax") else "")
    tol = cfg.disc("dedup_tol") if cfg is not None else 1e-3
    cat = search.critical_circle_catalog(loops, labels, tol)
    results = _catalog_record(cat, labels)
    results["inputs"] = [Path(p).name for p in paths]
    return results, EXIT_OK


HANDLERS = {
    "integrate": cmd_integrate,
    "find-min": cmd_find_min,
    "minimax": cmd_minimax,
    "sweep": cmd_sweep,
    "estimate-cu": cmd_estimate_cu,
    "index": cmd_index,
    "perturb": cmd_perturb,
    "catalog": cmd_catalog,
}
CONFIG_OPTIONAL = {"perturb", "catalog"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--out", help="run directory (overrides the config's output)")
    common.add_argument("--seed", type=int, help="rng seed (overrides the config)")
    common.add_argument("--jobs", help="worker processes (default: $MAGFLOW_JOBS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="magflow", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=f"magflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("integrate", parents=[common], help="integrate one orbit")
    p.add_argument("--T", type=float, help="integration time")
    for name in ("find-min", "minimax", "index"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--kappa", type=float)
        if name == "minimax":
            p.add_argument("--n", type=int)
        if name == "index":
            p.add_argument("--loop", help="loop JSON record")
    sub.add_parser("sweep", parents=[common], help="c_n over an energy grid")
    sub.add_parser("estimate-cu", parents=[common], help="bracket the universal-cover value")
    p = sub.add_parser("perturb", parents=[common], help="hyperbolic perturbation of a matrix")
    p.add_argument("--matrix", help="JSON matrix file")
    p.add_argument("--t", type=float)
    p = sub.add_parser("catalog", parents=[common], help="deduplicate critical loops")
    p.add_argument("--loops", nargs="+", help="loop JSON records")
    return parser


def run(argv=None) -> int:
    """Run one subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="magflow: %(message)s")
    cfg = None
    run_dir = None
    try:
        jobs = resolve_jobs(args.jobs)
        if args.config:
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
        elif args.command not in CONFIG_OPTIONAL:
            raise ConfigError(f"{args.command} needs --config")
        out = args.out or (cfg.output if cfg else "run")
        run_dir = RunDir(out)
        results, status = HANDLERS[args.command](args, cfg, run_dir, jobs)
    except (ConfigError, DomainError, GeometryError, PreconditionError, BracketError) as exc:
        print(f"magflow {args.command}: error: {exc}", file=sys.stderr)
        if run_dir is not None:
            run_dir.finish(args.command, cfg, {"error": str(exc)}, EXIT_INVALID)
        return EXIT_INVALID
    except (OSError, ValueError) as exc:
        print(f"magflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except MagflowError as exc:
        print(f"magflow {args.command}: failed: {exc}", file=sys.stderr)
        if run_dir is not None:
            run_dir.finish(args.command, cfg, {"error": str(exc)}, EXIT_NONCONVERGED)
        return EXIT_NONCONVERGED
    run_dir.finish(args.command, cfg, results, status)
    if status == EXIT_NONCONVERGED:
        print(f"magflow {args.command}: some computations did not converge; "
              f"partial results in {run_dir.root}", file=sys.stderr)
    return status


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
