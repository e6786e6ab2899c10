"""Accelerated dual proximal gradient iteration over the scenario tree.

The soft-constrained problem is split as ``min f(z) + g(t)`` subject to
``H z = t`` where H stacks two copies of every non-root state and one copy of
every edge control.  The dual iteration alternates an extrapolation, the exact
inner minimization (solve step), a separable proximal update and a dual ascent
step, with the classic momentum recursion for the extrapolation weight.

A diagonal preconditioner rescales the dual space; state-copy blocks use one
scalar per stage so the distance proximal maps stay in closed form, input
blocks are scaled componentwise.  The step size is the reciprocal of the dual
gradient's Lipschitz constant, measured by power iteration on the actual
(scaled) dual-gradient operator.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from threadpoolctl import threadpool_limits

from .elimination import EliminationBasis, StageCache, build_stage_cache, compute_basis
from .errors import DimensionError, ValidationError
from .factor import FactorCache, SolveContext, factor_step
from .model import NetworkModel
from .points import DualPoint, PrimalPoint, SplitPoint
from .tree import DemandForecast, ScenarioTree, node_demands

__all__ = [
    "SolverConfig", "SolveReport", "DualScaling",
    "apply_H", "adjoint_H", "prox_g", "theta_update", "extrapolate",
    "compute_lambda", "compute_preconditioner", "solve", "smooth_cost",
]


@dataclass
class SolverConfig:
    """Knobs for one solve; defaults follow the fixed-iteration policy."""

    max_iters: int = 500
    lam: float | None = None
    precondition: bool = True
    threads: int = 1
    record_residuals: bool = False
    warm_start: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if self.lam is not None and self.lam <= 0:
            raise ValidationError("lambda override must be positive")
        if self.threads < 1:
            raise ValidationError("thread count must be >= 1")


@dataclass
class SolveReport:
    """Outcome of one SMPC solve.

    All numerical fields are deterministic given the inputs (wall time is
    excluded from that contract).
    """

    u0: np.ndarray
    x: np.ndarray            # last primal iterate, states over all nodes
    u: np.ndarray            # last primal iterate, controls over all edges
    x_avg: np.ndarray        # ergodic states
    u_avg: np.ndarray        # ergodic controls
    residual_inf: float
    gap: float
    iterations: int
    wall_time_s: float
    lam: float
    preconditioned: bool
    residual_trace: np.ndarray | None = None
    gap_trace: np.ndarray | None = None
    dual: DualPoint | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {
            "u0": self.u0.tolist(),
            "x": self.x.tolist(),
            "u": self.u.tolist(),
            "x_avg": self.x_avg.tolist(),
            "u_avg": self.u_avg.tolist(),
            "residual_inf": self.residual_inf,
            "gap": self.gap,
            "iterations": self.iterations,
            "wall_time_s": self.wall_time_s,
            "lambda": self.lam,
            "preconditioned": self.preconditioned,
        }
        if self.residual_trace is not None:
            d["residual_trace"] = self.residual_trace.tolist()
        if self.gap_trace is not None:
            d["gap_trace"] = self.gap_trace.tolist()
        return d


# -- splitting operator -------------------------------------------------------

def apply_H(z: PrimalPoint) -> SplitPoint:
    """Copy map: two state copies per non-root node, one control copy per edge."""
    return SplitPoint(z.x[1:].copy(), z.x[1:].copy(), z.u.copy())


def adjoint_H(y: DualPoint) -> PrimalPoint:
    """Adjoint of the copy map; the root state receives nothing."""
    n_x = y.sig.shape[1]
    x = np.vstack([np.zeros((1, n_x)), y.sig + y.zeta])
    return PrimalPoint(x, y.psi.copy())


# -- proximal operator of g ---------------------------------------------------

@dataclass(frozen=True)
class DualScaling:
    """Per-stage diagonal scaling of the dual space.

    State-copy blocks carry one scalar per stage (the block prox of a
    euclidean distance needs a uniform metric); input blocks are scaled
    componentwise.  Index j-1 holds the scaling of stage-j state copies and of
    the controls applied while entering stage j.
    """

    sig_stage: np.ndarray   # (N,)
    zeta_stage: np.ndarray  # (N,)
    psi_stage: np.ndarray   # (N, n_u)

    @classmethod
    def identity(cls, N: int, n_u: int) -> "DualScaling":
        return cls(np.ones(N), np.ones(N), np.ones((N, n_u)))

    def expand(self, tree: ScenarioTree):
        """Per-edge scaling arrays aligned with the dual blocks."""
        stage = tree.edge_stage()
        return (self.sig_stage[stage][:, None],
                self.zeta_stage[stage][:, None],
                self.psi_stage[stage])


def _prox_distance_rows(t: np.ndarray, proj: np.ndarray, weight) -> np.ndarray:
    """Row-blockwise prox of weight * dist(. | C) given the projections."""
    gap = proj - t
    dist = np.linalg.norm(gap, axis=1)
    w = np.broadcast_to(np.asarray(weight, dtype=float), dist.shape)
    factor = np.ones_like(dist)
    outside = dist > w
    factor[outside] = w[outside] / dist[outside]
    return t + factor[:, None] * gap


def prox_g(t: SplitPoint, lam: float, model: NetworkModel,
           scaling_edges=None) -> SplitPoint:
    """Proximal operator of g with parameter ``lam``, block by block.

    State-copy blocks apply the shrink-toward-projection rule of a weighted
    distance function; input copies project onto the flow box.  When a dual
    scaling is active, sets and weights are rescaled accordingly so the
    operation stays exact in the scaled coordinates.
    """
    if lam <= 0:
        raise ValidationError("prox parameter must be positive")
    if scaling_edges is None:
        sig_s = zeta_s = np.ones((t.sig.shape[0], 1))
        psi_s = np.ones((1, t.psi.shape[1]))
    else:
        sig_s, zeta_s, psi_s = scaling_edges

    proj_sig = np.maximum(t.sig, sig_s * model.x_s[None, :])
    sig = _prox_distance_rows(t.sig, proj_sig, lam * model.Wx / sig_s[:, 0])

    lo = zeta_s * model.x_min[None, :]
    hi = zeta_s * model.x_max[None, :]
    proj_zeta = np.clip(t.zeta, lo, hi)
    zeta = _prox_distance_rows(t.zeta, proj_zeta, lam * model.gamma_d / zeta_s[:, 0])

    psi = np.clip(t.psi, psi_s * model.u_min[None, :], psi_s * model.u_max[None, :])
    return SplitPoint(sig, zeta, psi)


# -- scalar recursions --------------------------------------------------------

def theta_update(theta: float) -> float:
    """Momentum recursion ``0.5 (sqrt(th^4 + 4 th^2) - th^2)``."""
    if not 0.0 < theta <= 1.0:
        raise ValidationError(f"theta must lie in (0, 1], got {theta!r}")
    return 0.5 * (np.sqrt(theta ** 4 + 4.0 * theta ** 2) - theta ** 2)


def extrapolate(y: DualPoint, y_prev: DualPoint, theta: float,
                theta_prev: float) -> DualPoint:
    """Dual extrapolation ``y + theta (1/theta_prev - 1) (y - y_prev)``."""
    coef = theta * (1.0 / theta_prev - 1.0)
    return DualPoint(y.sig + coef * (y.sig - y_prev.sig),
                     y.zeta + coef * (y.zeta - y_prev.zeta),
                     y.psi + coef * (y.psi - y_prev.psi))


# -- preconditioning and step size -------------------------------------------

def _single_branch_lift(model: NetworkModel, basis: EliminationBasis, N: int):
    """Map from stacked reduced controls to stacked (x, u) for one scenario."""
    n_x, n_u, n_v = model.n_x, basis.n_u, basis.n_v
    Bbar = model.B @ basis.L
    Mx = np.zeros((N * n_x, N * n_v))
    powers = [np.eye(n_x)]
    for _ in range(N):
        powers.append(model.A @ powers[-1])
    for i in range(1, N + 1):          # state x_i
        for j in range(i):             # control v_j
            Mx[(i - 1) * n_x:i * n_x, j * n_v:(j + 1) * n_v] = powers[i - 1 - j] @ Bbar
    Mu = np.kron(np.eye(N), basis.L)
    return Mx, Mu


def _single_branch_hessian(basis: EliminationBasis, N: int) -> np.ndarray:
    T = 2.0 * np.eye(N) - np.eye(N, k=1) - np.eye(N, k=-1)
    T[-1, -1] = 1.0
    return 2.0 * np.kron(T, basis.Rbar)


def dual_hessian_row_sums(W: np.ndarray, K: np.ndarray,
                          block: int = 512) -> np.ndarray:
    """Row sums of |W K^{-1} W'|, the diagonal bound of the dual Hessian."""
    K_chol = scipy.linalg.cho_factor(0.5 * (K + K.T))
    G = scipy.linalg.cho_solve(K_chol, W.T).T
    out = np.empty(W.shape[0])
    for s in range(0, W.shape[0], block):
        e = min(s + block, W.shape[0])
        out[s:e] = np.abs(G[s:e] @ W.T).sum(axis=1)
    return out


def compute_preconditioner(basis: EliminationBasis, model: NetworkModel, N: int,
                           tree: ScenarioTree | None = None) -> DualScaling:
    """Diagonal dual scaling from the single-branch dual Hessian.

    Row sums of the single-branch dual Hessian bound its diagonal; their
    inverse square roots scale the dual blocks, replicated across all nodes of
    a stage.  When the tree is supplied, each stage is further divided by its
    smallest edge probability, which is how the tree's dual curvature deviates
    from the single branch.  Nonpositive or nonfinite entries trigger an
    identity fallback with a warning.
    """
    n_x, n_u = model.n_x, model.n_u
    Mx, Mu = _single_branch_lift(model, basis, N)
    W = np.vstack([Mx, Mx, Mu])
    d = dual_hessian_row_sums(W, _single_branch_hessian(basis, N))

    nxN = N * n_x
    d_sig = d[:nxN].reshape(N, n_x)
    d_zeta = d[nxN:2 * nxN].reshape(N, n_x)
    d_psi = d[2 * nxN:].reshape(N, n_u)

    if tree is not None:
        prep = np.empty(N)
        for j in range(1, N + 1):
            prep[j - 1] = float(tree.prob[tree.stage_slice(j)].min())
        d_sig = d_sig / prep[:, None]
        d_zeta = d_zeta / prep[:, None]
        d_psi = d_psi / prep[:, None]

    sig_m = d_sig.mean(axis=1)
    zeta_m = d_zeta.mean(axis=1)
    if (np.any(~np.isfinite(sig_m)) or np.any(sig_m <= 0)
            or np.any(~np.isfinite(zeta_m)) or np.any(zeta_m <= 0)
            or np.any(~np.isfinite(d_psi)) or np.any(d_psi <= 0)):
        warnings.warn("dual Hessian diagonal not positive; preconditioner "
                      "falls back to identity scaling")
        return DualScaling.identity(N, n_u)
    return DualScaling(1.0 / np.sqrt(sig_m), 1.0 / np.sqrt(zeta_m),
                       1.0 / np.sqrt(d_psi))


def _zero_cache(basis: EliminationBasis, model: NetworkModel,
                tree: ScenarioTree) -> StageCache:
    demands = np.zeros((tree.n_edges, model.n_d))
    return build_stage_cache(basis, model, tree, demands, k=0, q=np.zeros(model.n_u))


def compute_lambda(basis: EliminationBasis, factor: FactorCache,
                   model: NetworkModel, tree: ScenarioTree,
                   scaling: DualScaling | None = None,
                   tol: float = 1e-8, max_iter: int = 600) -> float:
    """Step size ``1 / L`` with L measured on the true dual-gradient operator.

    The dual gradient is affine in the dual vector, so its Lipschitz constant
    is the top eigenvalue of the symmetric map ``y -> -S H (z(S y) - z(0)) S``
    obtained from two solve steps; deterministic power iteration estimates it
    to ``tol``.  A 0.5 percent margin keeps the step strictly inside 1/L.
    """
    if basis.sigma <= 0:
        raise ValidationError("strong convexity modulus must be positive")
    cache = _zero_cache(basis, model, tree)
    n_e = tree.n_edges
    edges = scaling.expand(tree) if scaling is not None else None
    p0 = np.zeros(model.n_x)

    with threadpool_limits(limits=1):
        with SolveContext(factor, tree, threads=1) as ctx:
            z0 = apply_H(ctx.solve(cache, DualPoint.zeros(n_e, model.n_x, model.n_u), p0))

            def operator(y: DualPoint) -> DualPoint:
                if edges is None:
                    w = y
                else:
                    w = DualPoint(y.sig * edges[0], y.zeta * edges[1], y.psi * edges[2])
                Hz = apply_H(ctx.solve(cache, w, p0))
                d = DualPoint(z0.sig - Hz.sig, z0.zeta - Hz.zeta, z0.psi - Hz.psi)
                if edges is not None:
                    d = DualPoint(d.sig * edges[0], d.zeta * edges[1], d.psi * edges[2])
                return d

            y = DualPoint(np.ones((n_e, model.n_x)), np.ones((n_e, model.n_x)),
                          np.ones((n_e, model.n_u)))
            lam_max = 0.0
            for _ in range(max_iter):
                norm = np.sqrt(_dual_dot(y, y))
                if norm == 0.0:
                    raise ValidationError("dual operator vanished during power iteration")
                y = DualPoint(y.sig / norm, y.zeta / norm, y.psi / norm)
                Dy = operator(y)
                new = _dual_dot(y, Dy)
                if abs(new - lam_max) <= tol * max(1.0, abs(new)):
                    lam_max = new
                    break
                lam_max = new
                y = Dy

    if not np.isfinite(lam_max) or lam_max <= 0:
        raise ValidationError(f"dual Lipschitz estimate invalid: {lam_max!r}")
    return 0.995 / lam_max


def _dual_dot(a: DualPoint, b: DualPoint) -> float:
    return float((a.sig * b.sig).sum() + (a.zeta * b.zeta).sum()
                 + (a.psi * b.psi).sum())


# -- cost evaluation and gap estimate ------------------------------------------

def smooth_cost(model: NetworkModel, tree: ScenarioTree, cache: StageCache,
                u: np.ndarray) -> float:
    """Probability-weighted economic plus smoothing cost of edge controls."""
    pa = tree.parent_edge()
    u_prev = np.where((pa >= 0)[:, None], u[pa], cache.q[None, :])
    du = u - u_prev
    stages = tree.edge_stage()
    prices = np.array([model.price(cache.k + j) for j in range(tree.N)])
    econ = model.W_alpha * np.einsum("ej,ej->e", prices[stages], u)
    smooth = np.einsum("ej,jk,ek->e", du, model.Wu, du)
    return float(np.dot(tree.edge_prob, econ + smooth))


def _soft_cost(model: NetworkModel, x_nodes: np.ndarray) -> float:
    below = np.maximum(model.x_s[None, :] - x_nodes, 0.0)
    outside = x_nodes - np.clip(x_nodes, model.x_min, model.x_max)
    return float(model.Wx * np.linalg.norm(below, axis=1).sum()
                 + model.gamma_d * np.linalg.norm(outside, axis=1).sum())


def primal_value(model: NetworkModel, tree: ScenarioTree, cache: StageCache,
                 z: PrimalPoint, clamp_controls: bool = True) -> float:
    """Soft-constrained objective at z, with controls clamped onto the box."""
    u = np.clip(z.u, model.u_min, model.u_max) if clamp_controls else z.u
    return smooth_cost(model, tree, cache, u) + _soft_cost(model, z.x[1:])


def _project_junction_box(model: NetworkModel, demands: np.ndarray,
                          u: np.ndarray) -> np.ndarray:
    """Per-edge projection onto the junction equality intersected with the box.

    Single-junction networks use exact multiplier bisection on the clamped
    affine family; larger junction counts fall back to Dykstra sweeps between
    the affine set and the box.
    """
    lo, hi = model.u_min[None, :], model.u_max[None, :]
    if model.n_e == 1:
        a = model.E[0]
        b = -(demands @ model.Ed.T)[:, 0]
        mu_lo = np.full(u.shape[0], -1.0)
        mu_hi = np.full(u.shape[0], 1.0)

        def balance(mu):
            return np.clip(u - mu[:, None] * a[None, :], lo, hi) @ a

        # phi(mu) is nonincreasing; expand the bracket until it straddles b
        for _ in range(60):
            need = balance(mu_lo) < b
            if not need.any() and not (balance(mu_hi) > b).any():
                break
            mu_lo[need] *= 2.0
            high = balance(mu_hi) > b
            mu_hi[high] *= 2.0
        for _ in range(80):
            mid = 0.5 * (mu_lo + mu_hi)
            too_high = balance(mid) > b
            mu_lo = np.where(too_high, mid, mu_lo)
            mu_hi = np.where(too_high, mu_hi, mid)
        return np.clip(u - (0.5 * (mu_lo + mu_hi))[:, None] * a[None, :], lo, hi)

    pinv = model.E.T @ np.linalg.inv(model.E @ model.E.T)
    target = -(demands @ model.Ed.T)
    x_it = u.copy()
    inc = np.zeros_like(u)
    for _ in range(200):
        ya = x_it - (x_it @ model.E.T - target) @ pinv.T
        x_new = np.clip(ya + inc, lo, hi)
        inc = ya + inc - x_new
        if np.max(np.abs(x_new - x_it)) < 1e-13:
            x_it = x_new
            break
        x_it = x_new
    return x_it - (x_it @ model.E.T - target) @ pinv.T


def _propagate_states(model: NetworkModel, tree: ScenarioTree,
                      demands: np.ndarray, u: np.ndarray,
                      p: np.ndarray) -> np.ndarray:
    x = np.empty((tree.n_nodes, model.n_x))
    x[0] = p
    for j in range(tree.N):
        nodes = tree.stage_slice(j + 1)
        rows = slice(nodes.start - 1, nodes.stop - 1)
        x[nodes] = (x[tree.anc[nodes]] @ model.A.T + u[rows] @ model.B.T
                    + demands[rows] @ model.Gd.T)
    return x


def _project_dual_domain(model: NetworkModel, y: DualPoint) -> DualPoint:
    """Nearest dual point with finite conjugate value for every block."""
    sig = np.minimum(y.sig, 0.0)
    norms = np.linalg.norm(sig, axis=1)
    over = norms > model.Wx
    sig[over] *= (model.Wx / norms[over])[:, None]
    zeta = y.zeta.copy()
    norms = np.linalg.norm(zeta, axis=1)
    over = norms > model.gamma_d
    zeta[over] *= (model.gamma_d / norms[over])[:, None]
    return DualPoint(sig, zeta, y.psi.copy())


def _conjugate_g(model: NetworkModel, y: DualPoint) -> float:
    """g*(y) for a point already inside the domain of g*."""
    val = float((y.sig * model.x_s[None, :]).sum())
    val += float(np.where(y.zeta > 0, y.zeta * model.x_max[None, :],
                          y.zeta * model.x_min[None, :]).sum())
    val += float(np.where(y.psi > 0, y.psi * model.u_max[None, :],
                          y.psi * model.u_min[None, :]).sum())
    return val


def duality_gap(model: NetworkModel, tree: ScenarioTree, cache: StageCache,
                ctx: SolveContext, p: np.ndarray, z_avg: PrimalPoint,
                y: DualPoint) -> float:
    """Objective at a feasible point near the ergodic iterate minus a true
    dual lower bound.

    The ergodic controls (junction-feasible by construction) are projected
    onto the box without leaving the junction set and the states re-propagated
    through the dynamics, so the primal side is the value of a genuinely
    feasible point.  The dual point is projected into the domain of g*, so the
    dual side is a valid lower bound; the gap is nonnegative up to arithmetic.
    """
    u_feas = _project_junction_box(model, cache.demands, z_avg.u)
    x_feas = _propagate_states(model, tree, cache.demands, u_feas, p)
    primal = smooth_cost(model, tree, cache, u_feas) + _soft_cost(model, x_feas[1:])

    y_hat = _project_dual_domain(model, y)
    z_hat = ctx.solve(cache, y_hat, p)
    Hz = apply_H(z_hat)
    pairing = _dual_dot(DualPoint(Hz.sig, Hz.zeta, Hz.psi), y_hat)
    dual_value = pairing + smooth_cost(model, tree, cache, z_hat.u) \
        - _conjugate_g(model, y_hat)
    return primal - dual_value


# -- main iteration -------------------------------------------------------------

def solve(model: NetworkModel, tree: ScenarioTree, forecast: DemandForecast,
          p, q, config: SolverConfig | None = None, *,
          basis: EliminationBasis | None = None,
          factor: FactorCache | None = None,
          cache: StageCache | None = None,
          scaling: DualScaling | None = None,
          lam: float | None = None,
          warm_dual: DualPoint | None = None) -> SolveReport:
    """Run the accelerated dual iteration for a fixed number of iterations.

    Precomputed pieces (basis, factor, scaling, step size) may be passed in by
    callers that solve repeatedly; anything omitted is computed here.
    """
    config = config or SolverConfig()
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (model.n_x,):
        raise DimensionError(f"p: shape {p.shape}, expected ({model.n_x},)")
    if q.shape != (model.n_u,):
        raise DimensionError(f"q: shape {q.shape}, expected ({model.n_u},)")

    basis = basis or compute_basis(model)
    factor = factor or factor_step(basis, model)
    if cache is None:
        cache = build_stage_cache(basis, model, tree, node_demands(tree, forecast),
                                  k=forecast.k, q=q)
    if config.precondition and scaling is None:
        scaling = compute_preconditioner(basis, model, tree.N, tree=tree)
    if not config.precondition:
        scaling = None
    lam = lam if lam is not None else config.lam
    if lam is None:
        lam = compute_lambda(basis, factor, model, tree, scaling=scaling)

    n_e = tree.n_edges
    edges = scaling.expand(tree) if scaling is not None else None
    t_start = time.perf_counter()

    y = DualPoint.zeros(n_e, model.n_x, model.n_u)
    if config.warm_start and warm_dual is not None:
        y = warm_dual.copy()
    y_prev = y.copy()
    theta, theta_prev = 1.0, 1.0

    x_avg = np.zeros((tree.n_nodes, model.n_x))
    u_avg = np.zeros((n_e, model.n_u))
    resid_trace = np.empty(config.max_iters) if config.record_residuals else None
    gap_trace = np.empty(config.max_iters) if config.record_residuals else None
    resid_inf = np.inf

    with threadpool_limits(limits=1):
        with SolveContext(factor, tree, threads=config.threads) as ctx:
            for nu in range(config.max_iters):
                w = extrapolate(y, y_prev, theta, theta_prev)
                if edges is not None:
                    w_orig = DualPoint(w.sig * edges[0], w.zeta * edges[1],
                                       w.psi * edges[2])
                else:
                    w_orig = w
                z = ctx.solve(cache, w_orig, p)
                Hz = apply_H(z)
                if edges is not None:
                    Hz_s = SplitPoint(Hz.sig * edges[0], Hz.zeta * edges[1],
                                      Hz.psi * edges[2])
                else:
                    Hz_s = Hz

                t_arg = SplitPoint(w.sig / lam + Hz_s.sig,
                                   w.zeta / lam + Hz_s.zeta,
                                   w.psi / lam + Hz_s.psi)
                t = prox_g(t_arg, 1.0 / lam, model, scaling_edges=edges)

                y_next = DualPoint(w.sig + lam * (Hz_s.sig - t.sig),
                                   w.zeta + lam * (Hz_s.zeta - t.zeta),
                                   w.psi + lam * (Hz_s.psi - t.psi))

                # ergodic average with the current momentum weight
                x_avg *= (1.0 - theta)
                x_avg += theta * z.x
                u_avg *= (1.0 - theta)
                u_avg += theta * z.u

                if edges is not None:
                    resid_inf = max(
                        np.max(np.abs(Hz.sig - t.sig / edges[0])) if t.sig.size else 0.0,
                        np.max(np.abs(Hz.zeta - t.zeta / edges[1])),
                        np.max(np.abs(Hz.psi - t.psi / edges[2])))
                else:
                    resid_inf = max(np.max(np.abs(Hz.sig - t.sig)),
                                    np.max(np.abs(Hz.zeta - t.zeta)),
                                    np.max(np.abs(Hz.psi - t.psi)))

                if config.record_residuals:
                    resid_trace[nu] = resid_inf
                    y_orig = _unscale_dual(y_next, edges)
                    gap_trace[nu] = duality_gap(
                        model, tree, cache, ctx, p,
                        PrimalPoint(x_avg, u_avg), y_orig)

                y_prev, y = y, y_next
                theta_prev, theta = theta, theta_update(theta)

            z_last = PrimalPoint(ctx.x.copy(), ctx.u.copy())
            y_final = _unscale_dual(y, edges)
            gap = duality_gap(model, tree, cache, ctx, p,
                              PrimalPoint(x_avg, u_avg), y_final)

    wall = time.perf_counter() - t_start
    return SolveReport(
        u0=u_avg[0].copy(), x=z_last.x, u=z_last.u,
        x_avg=x_avg, u_avg=u_avg,
        residual_inf=float(resid_inf), gap=float(gap),
        iterations=config.max_iters, wall_time_s=wall,
        lam=float(lam), preconditioned=scaling is not None,
        residual_trace=resid_trace, gap_trace=gap_trace,
        dual=y,
    )


def _unscale_dual(y: DualPoint, edges) -> DualPoint:
    if edges is None:
        return y
    return DualPoint(y.sig * edges[0], y.zeta * edges[1], y.psi * edges[2])
