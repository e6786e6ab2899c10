"""Command-line interface: validate, solve, simulate and bench subcommands.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 internal error.
``TREESMPC_THREADS`` provides the default worker count for --threads.
"""

from __future__ import annotations

import argparse
import json
import os
import pathlib
import sys
import time

import numpy as np

from . import engine
from .closed_loop import (SimulationConfig, emit_outputs, load_demand_file,
                          run_closed_loop)
from .elimination import build_stage_cache, compute_basis
from .errors import DimensionError, ParseError, ValidationError
from .factor import SolveContext, factor_step
from .model import _read_json, load_network
from .points import DualPoint, SplitPoint
from .tree import DemandForecast, load_tree, node_demands

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_INTERNAL = 3


def _default_threads() -> int:
    env = os.environ.get("TREESMPC_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _add_solver_flags(sp):
    sp.add_argument("--iters", type=int, default=500,
                    help="fixed iteration count (default 500)")
    sp.add_argument("--lambda", dest="lam", type=float, default=None,
                    help="override the computed step size")
    sp.add_argument("--no-precondition", action="store_true",
                    help="disable the diagonal dual preconditioner")
    sp.add_argument("--threads", type=int, default=None,
                    help="worker threads (default $TREESMPC_THREADS or 1)")


def _solver_config(args) -> engine.SolverConfig:
    threads = args.threads if args.threads is not None else _default_threads()
    return engine.SolverConfig(max_iters=args.iters, lam=args.lam,
                               precondition=not args.no_precondition,
                               threads=threads)


def _load_vector(path, name) -> np.ndarray:
    doc = _read_json(path, name)
    arr = np.asarray(doc, dtype=float).ravel()
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"{name}: entries must be finite")
    return arr


def _cmd_validate(args) -> int:
    problems = []
    try:
        model = load_network(args.network)
        print(f"network OK: n_x={model.n_x} n_u={model.n_u} "
              f"n_d={model.n_d} n_e={model.n_e}")
    except (ParseError, ValidationError) as exc:
        problems.append(f"network: {exc}")
    try:
        tree = load_tree(args.tree)
        print(f"tree OK: N={tree.N} nodes={tree.n_nodes} scenarios={tree.n_s}")
    except (ParseError, ValidationError) as exc:
        problems.append(f"tree: {exc}")
    for msg in problems:
        print(msg, file=sys.stderr)
    return EXIT_VALIDATION if problems else EXIT_OK


def _cmd_solve(args) -> int:
    model = load_network(args.network)
    tree = load_tree(args.tree)
    _k0, profile = load_demand_file(args.forecast)
    if profile.shape[0] < tree.N:
        raise ValidationError(
            f"forecast holds {profile.shape[0]} steps, tree horizon is {tree.N}")
    forecast = DemandForecast(profile[:tree.N], k=_k0)
    x0 = _load_vector(args.x0, "x0 file")
    uprev = _load_vector(args.uprev, "uprev file")
    config = _solver_config(args)
    report = engine.solve(model, tree, forecast, x0, uprev, config)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "solution.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
    print(f"u0 = {report.u0.tolist()}")
    print(f"residual_inf = {report.residual_inf:.6e}  gap = {report.gap:.6e}  "
          f"iterations = {report.iterations}  wall = {report.wall_time_s:.3f}s")
    print(f"wrote {out / 'solution.json'}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    config = SimulationConfig(
        network=args.network, tree=args.tree, demands=args.demands,
        forecast=args.forecast, h_s=args.hs, solver=_solver_config(args),
        out_dir=args.out, seed=args.seed,
        x0=_load_vector(args.x0, "x0 file") if args.x0 else None,
        u_prev=_load_vector(args.uprev, "uprev file") if args.uprev else None,
        k0=args.k0)
    result = run_closed_loop(config)
    paths = emit_outputs(result, args.out, config=config)
    print(json.dumps(result.kpis.to_dict(), indent=1))
    print(f"wrote {paths['trajectory']}, {paths['kpi']}, {paths['meta']}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    model = load_network(args.network)
    tree = load_tree(args.tree)
    threads = args.threads if args.threads is not None else _default_threads()
    repeat = max(1, args.repeat)

    basis_times = []
    t0 = time.perf_counter()
    basis = compute_basis(model)
    factor = factor_step(basis, model)
    for _ in range(repeat):
        t1 = time.perf_counter()
        factor = factor_step(basis, model)
        basis_times.append(time.perf_counter() - t1)

    forecast = DemandForecast(np.zeros((tree.N, model.n_d)), k=0)
    cache = build_stage_cache(basis, model, tree, node_demands(tree, forecast),
                              k=0, q=np.zeros(model.n_u))
    rng = np.random.default_rng(0)
    w = DualPoint(rng.standard_normal((tree.n_edges, model.n_x)),
                  rng.standard_normal((tree.n_edges, model.n_x)),
                  rng.standard_normal((tree.n_edges, model.n_u)))
    p = 0.5 * (model.x_min + model.x_max)

    from threadpoolctl import threadpool_limits
    solve_times = []
    prox_times = []
    with threadpool_limits(limits=1):
        with SolveContext(factor, tree, threads=threads) as ctx:
            z = ctx.solve(cache, w, p)
            for _ in range(repeat):
                t1 = time.perf_counter()
                z = ctx.solve(cache, w, p)
                solve_times.append(time.perf_counter() - t1)
            t_split = SplitPoint(z.x[1:].copy(), z.x[1:].copy(), z.u.copy())
            for _ in range(repeat):
                t1 = time.perf_counter()
                engine.prox_g(t_split, 1.0, model)
                prox_times.append(time.perf_counter() - t1)

    t1 = time.perf_counter()
    engine.solve(model, tree, forecast, p, np.zeros(model.n_u),
                 engine.SolverConfig(max_iters=args.iters, threads=threads))
    total = time.perf_counter() - t1

    report = {
        "network": str(args.network), "tree": str(args.tree),
        "scenarios": tree.n_s, "nodes": tree.n_nodes, "horizon": tree.N,
        "threads": threads, "repeat": repeat,
        "factor_step_s": float(np.median(basis_times)),
        "solve_step_s": float(np.median(solve_times)),
        "prox_s": float(np.median(prox_times)),
        "solve_total_s": total,
        "iterations": args.iters,
        "setup_s": time.perf_counter() - t0,
    }
    print(json.dumps(report, indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="treesmpc",
                                 description="Scenario-tree SMPC for water networks")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("validate", help="check a network and tree file")
    sp.add_argument("--network", required=True)
    sp.add_argument("--tree", required=True)
    sp.set_defaults(fn=_cmd_validate)

    sp = sub.add_parser("solve", help="one SMPC solve from files")
    sp.add_argument("--network", required=True)
    sp.add_argument("--tree", required=True)
    sp.add_argument("--forecast", required=True)
    sp.add_argument("--x0", required=True)
    sp.add_argument("--uprev", required=True)
    sp.add_argument("--out", required=True)
    _add_solver_flags(sp)
    sp.set_defaults(fn=_cmd_solve)

    sp = sub.add_parser("simulate", help="closed-loop simulation")
    sp.add_argument("--network", required=True)
    sp.add_argument("--tree", required=True)
    sp.add_argument("--demands", required=True, help="realized demand file")
    sp.add_argument("--forecast", default=None,
                    help="nominal profile file (default: persistence forecaster)")
    sp.add_argument("--hs", type=int, default=168, help="simulation length")
    sp.add_argument("--x0", default=None)
    sp.add_argument("--uprev", default=None)
    sp.add_argument("--k0", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    _add_solver_flags(sp)
    sp.set_defaults(fn=_cmd_simulate)

    sp = sub.add_parser("bench", help="timing report")
    sp.add_argument("--network", required=True)
    sp.add_argument("--tree", required=True)
    sp.add_argument("--repeat", type=int, default=20)
    sp.add_argument("--iters", type=int, default=500)
    sp.add_argument("--threads", type=int, default=None)
    sp.set_defaults(fn=_cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValidationError, ParseError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
