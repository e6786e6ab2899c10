"""Closed-loop simulation harness with KPI reporting and file outputs.

One factor step and one preconditioning pass happen up front; each simulated
hour then refreshes the per-solve vectors for the current forecast, runs the
fixed-iteration solver, applies the first root-edge control to the plant with
the realized demand, and rolls the previous-control state forward.
"""

from __future__ import annotations

import csv
import json
import pathlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .elimination import build_stage_cache, compute_basis
from .errors import DimensionError, ParseError, ValidationError
from .factor import factor_step
from .model import NetworkModel, load_network, simulate_step, stage_cost
from .model import _read_json
from .tree import DemandForecast, ScenarioTree, load_tree, node_demands

__all__ = [
    "SimulationConfig", "KpiReport", "SimulationResult",
    "run_closed_loop", "compute_kpis", "emit_outputs", "load_demand_file",
]


@dataclass
class SimulationConfig:
    """Inputs of one closed-loop run; paths may be pre-loaded objects."""

    network: str | pathlib.Path | NetworkModel
    tree: str | pathlib.Path | ScenarioTree
    demands: str | pathlib.Path | np.ndarray       # realized demands
    forecast: str | pathlib.Path | np.ndarray | None = None  # nominal profile
    horizon: int | None = None                     # must match the tree if given
    h_s: int = 168
    solver: engine.SolverConfig = field(default_factory=engine.SolverConfig)
    out_dir: str | pathlib.Path | None = None
    seed: int = 0
    x0: np.ndarray | None = None
    u_prev: np.ndarray | None = None
    k0: int = 0
    persistence_period: int = 24

    def __post_init__(self):
        if self.h_s < 1:
            raise ValidationError("simulation length h_s must be >= 1")
        if self.horizon is not None and self.horizon < 1:
            raise ValidationError("horizon must be >= 1")


@dataclass(frozen=True)
class KpiReport:
    """Closed-loop performance indicators over the simulation window."""

    economic: float        # average price-weighted absolute flow cost
    smoothness: float      # average squared control increment
    safety_shortfall: float  # accumulated 1-norm drop below the safety level
    network_utility: float   # safety volume over average stored volume, percent

    def to_dict(self) -> dict:
        return {"KPI_E": self.economic, "KPI_dU": self.smoothness,
                "KPI_S": self.safety_shortfall, "KPI_R": self.network_utility}


@dataclass
class SimulationResult:
    states: np.ndarray        # (h_s + 1, n_x), states[0] = x0
    controls: np.ndarray      # (h_s, n_u)
    demands: np.ndarray       # (h_s, n_d) realized demands applied
    economic: np.ndarray      # (h_s,) stage cost pieces per step
    smoothing: np.ndarray
    safety: np.ndarray        # evaluated at the post-step state
    residuals: np.ndarray
    gaps: np.ndarray
    kpis: KpiReport
    wall_times: dict

    @property
    def h_s(self) -> int:
        return self.controls.shape[0]


def load_demand_file(source) -> tuple[int, np.ndarray]:
    """Demand profile files: ``{"k0": int, "demands": [[...], ...]}``."""
    doc = _read_json(source, "demand file")
    if not isinstance(doc, dict) or "demands" not in doc:
        raise ParseError("demand file: expected an object with a 'demands' array")
    arr = np.asarray(doc["demands"], dtype=float)
    if arr.ndim != 2 or not np.all(np.isfinite(arr)):
        raise ParseError("demand file: 'demands' must be a finite 2-D array")
    return int(doc.get("k0", 0)), arr


def _persistence_forecast(realized: np.ndarray, k: int, N: int, period: int) -> np.ndarray:
    """Repeat the last observed day; the first day reuses the earliest samples."""
    idx = np.maximum(np.arange(k, k + N) - period, 0)
    return realized[idx]


def run_closed_loop(config: SimulationConfig) -> SimulationResult:
    """Simulate ``h_s`` steps of the receding-horizon controller."""
    t0 = time.perf_counter()
    model = (config.network if isinstance(config.network, NetworkModel)
             else load_network(config.network))
    tree = (config.tree if isinstance(config.tree, ScenarioTree)
            else load_tree(config.tree))
    if config.horizon is not None and config.horizon != tree.N:
        raise ValidationError(
            f"configured horizon {config.horizon} != tree horizon {tree.N}")
    N, h_s = tree.N, config.h_s

    if isinstance(config.demands, np.ndarray):
        realized = np.asarray(config.demands, dtype=float)
    else:
        _k0, realized = load_demand_file(config.demands)
    if realized.shape[0] < h_s:
        raise ValidationError(
            f"realized demands cover {realized.shape[0]} steps, need h_s={h_s}")
    if realized.shape[1] != model.n_d:
        raise DimensionError(
            f"demand dimension {realized.shape[1]} != model n_d {model.n_d}")

    nominal = None
    if config.forecast is not None:
        if isinstance(config.forecast, np.ndarray):
            nominal = np.asarray(config.forecast, dtype=float)
        else:
            _k0, nominal = load_demand_file(config.forecast)
        if nominal.shape[0] < h_s + N:
            raise ValidationError(
                f"forecast profile covers {nominal.shape[0]} steps, "
                f"need h_s + N = {h_s + N}")

    x = (np.asarray(config.x0, dtype=float) if config.x0 is not None
         else 0.5 * (model.x_min + model.x_max))
    q = (np.asarray(config.u_prev, dtype=float) if config.u_prev is not None
         else np.clip(np.zeros(model.n_u), model.u_min, model.u_max))
    if x.shape != (model.n_x,):
        raise DimensionError(f"x0: shape {x.shape}, expected ({model.n_x},)")
    if q.shape != (model.n_u,):
        raise DimensionError(f"u_prev: shape {q.shape}, expected ({model.n_u},)")

    basis = compute_basis(model)
    factor = factor_step(basis, model)
    scaling = (engine.compute_preconditioner(basis, model, N, tree=tree)
               if config.solver.precondition else None)
    lam = config.solver.lam
    if lam is None:
        lam = engine.compute_lambda(basis, factor, model, tree, scaling=scaling)
    t_offline = time.perf_counter() - t0

    states = np.empty((h_s + 1, model.n_x))
    controls = np.empty((h_s, model.n_u))
    econ = np.empty(h_s)
    smooth = np.empty(h_s)
    safety = np.empty(h_s)
    residuals = np.empty(h_s)
    gaps = np.empty(h_s)
    states[0] = x
    q0 = q.copy()
    warm = None
    t_loop = time.perf_counter()

    for step in range(h_s):
        k = config.k0 + step
        if nominal is not None:
            dhat = nominal[step:step + N]
        else:
            dhat = _persistence_forecast(realized, step, N, config.persistence_period)
        forecast = DemandForecast(dhat, k=k)
        cache = build_stage_cache(basis, model, tree, node_demands(tree, forecast),
                                  k=k, q=q)
        report = engine.solve(model, tree, forecast, x, q, config.solver,
                              basis=basis, factor=factor, cache=cache,
                              scaling=scaling, lam=lam, warm_dual=warm)
        if config.solver.warm_start:
            warm = report.dual
        u0 = report.u0
        d_k = realized[step]
        x_next = simulate_step(model, x, u0, d_k)
        cost = stage_cost(model, x_next, u0, q, k)
        controls[step] = u0
        states[step + 1] = x_next
        econ[step] = cost.economic
        smooth[step] = cost.smoothing
        safety[step] = cost.safety
        residuals[step] = report.residual_inf
        gaps[step] = report.gap
        x, q = x_next, u0

    t_total = time.perf_counter() - t0
    kpis = compute_kpis(states[1:], controls, model, h_s=h_s, u_prev=q0,
                        k0=config.k0)
    return SimulationResult(
        states=states, controls=controls, demands=realized[:h_s].copy(),
        economic=econ, smoothing=smooth, safety=safety,
        residuals=residuals, gaps=gaps, kpis=kpis,
        wall_times={"offline_s": t_offline,
                    "loop_s": time.perf_counter() - t_loop,
                    "total_s": t_total,
                    "per_step_s": (time.perf_counter() - t_loop) / h_s})


def compute_kpis(states, controls, model: NetworkModel, h_s: int | None = None,
                 u_prev=None, k0: int = 0) -> KpiReport:
    """Performance indicators over ``h_s`` applied steps.

    ``states`` holds the post-step states x_1..x_{h_s}; ``u_prev`` is the
    predecessor of the first control for the increment term.
    """
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    h_s = controls.shape[0] if h_s is None else int(h_s)
    if states.shape[0] != h_s or controls.shape[0] != h_s:
        raise DimensionError(
            f"need {h_s} states and controls, got {states.shape[0]} and "
            f"{controls.shape[0]}")
    u_prev = (np.zeros(model.n_u) if u_prev is None
              else np.asarray(u_prev, dtype=float))

    prices = np.array([model.price(k0 + k) for k in range(h_s)])
    kpi_e = float(np.mean(np.einsum("kj,kj->k", prices, np.abs(controls))))
    du = np.diff(np.vstack([u_prev[None, :], controls]), axis=0)
    kpi_du = float(np.mean(np.sum(du ** 2, axis=1)))
    shortfall = np.maximum(model.x_s[None, :] - states, 0.0)
    kpi_s = float(np.sum(np.abs(shortfall)))
    avg_volume = float(np.mean(np.sum(np.abs(states), axis=1)))
    if avg_volume == 0.0:
        raise ValidationError("average stored volume is zero; utility KPI undefined")
    kpi_r = float(np.sum(np.abs(model.x_s)) / avg_volume * 100.0)
    return KpiReport(economic=kpi_e, smoothness=kpi_du,
                     safety_shortfall=kpi_s, network_utility=kpi_r)


def emit_outputs(result: SimulationResult, out_dir, config: SimulationConfig | None = None,
                 extra_meta: dict | None = None) -> dict:
    """Write trajectory.csv, kpi.json and run_meta.json; returns the paths."""
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_x = result.states.shape[1]
    n_u = result.controls.shape[1]

    traj = out / "trajectory.csv"
    with open(traj, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["k"] + [f"x{i}" for i in range(n_x)] + [f"u{i}" for i in range(n_u)]
            + ["economic", "smoothing", "safety", "residual", "gap"])
        fmt = lambda v: format(float(v), ".17g")
        for k in range(result.h_s):
            row = ([k] + [fmt(v) for v in result.states[k]]
                   + [fmt(v) for v in result.controls[k]]
                   + [fmt(result.economic[k]), fmt(result.smoothing[k]),
                      fmt(result.safety[k]), fmt(result.residuals[k]),
                      fmt(result.gaps[k])])
            writer.writerow(row)

    kpi_path = out / "kpi.json"
    with open(kpi_path, "w") as fh:
        json.dump(result.kpis.to_dict(), fh, indent=1)

    meta = {
        "h_s": result.h_s,
        "final_state": result.states[-1].tolist(),
        "wall_times": result.wall_times,
        "versions": _versions(),
    }
    if config is not None:
        meta["config"] = {
            "network": str(config.network) if not isinstance(config.network, NetworkModel) else "<in-memory>",
            "tree": str(config.tree) if not isinstance(config.tree, ScenarioTree) else "<in-memory>",
            "h_s": config.h_s,
            "seed": config.seed,
            "k0": config.k0,
            "solver": {"max_iters": config.solver.max_iters,
                       "lambda": config.solver.lam,
                       "precondition": config.solver.precondition,
                       "threads": config.solver.threads},
        }
    if extra_meta:
        meta.update(extra_meta)
    meta_path = out / "run_meta.json"
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=1)
    return {"trajectory": traj, "kpi": kpi_path, "meta": meta_path}


def _versions() -> dict:
    import numpy
    import scipy

    from . import __version__
    return {"treesmpc": __version__, "numpy": numpy.__version__,
            "scipy": scipy.__version__}
