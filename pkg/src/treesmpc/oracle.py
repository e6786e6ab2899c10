"""Independent slow-but-sure reference solvers for tiny instances.

Everything here is assembled literally from the model matrices as dense
blocks, with its own linear algebra path; nothing is shared with the tree
solver.  ``solve_dense_kkt`` solves the smooth equality-constrained inner
problem exactly and arbitrates the solve step.  ``solve_dense_full`` solves
the complete soft-constrained problem with a plain ADMM iteration (dense KKT
solves alternating with closed-form proximal updates), accurate enough to
cross-validate the accelerated solver to well below 1e-3.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionError, ValidationError
from .model import NetworkModel
from .tree import DemandForecast, ScenarioTree, node_demands

__all__ = ["DenseProblem", "build_dense", "solve_dense_kkt", "solve_dense_full",
           "dense_objective"]

MAX_DENSE_VARIABLES = 200


@dataclass
class DenseProblem:
    """Explicit matrices of the soft-constrained problem on one tree.

    Stacked decision vector: all non-root states first (n_x per node), then
    all edge controls (n_u per edge).  Objective is
    ``z' F z + c' z + soft state penalties`` subject to ``A_eq z = b_eq`` and
    the control box.
    """

    model: NetworkModel
    tree: ScenarioTree
    demands: np.ndarray
    p: np.ndarray
    q: np.ndarray
    k: int
    F: np.ndarray
    c: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    n_x_vars: int
    n_u_vars: int
    _kkt_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_vars(self) -> int:
        return self.n_x_vars + self.n_u_vars

    def x_slice(self, edge: int) -> slice:
        n_x = self.model.n_x
        return slice(edge * n_x, (edge + 1) * n_x)

    def u_slice(self, edge: int) -> slice:
        n_u = self.model.n_u
        return slice(self.n_x_vars + edge * n_u, self.n_x_vars + (edge + 1) * n_u)

    def split(self, z: np.ndarray):
        """Stacked vector -> (x over non-root nodes, u over edges)."""
        n_e = self.tree.n_edges
        x = z[:self.n_x_vars].reshape(n_e, self.model.n_x)
        u = z[self.n_x_vars:].reshape(n_e, self.model.n_u)
        return x, u


def build_dense(model: NetworkModel, tree: ScenarioTree,
                forecast: DemandForecast, p, q, k: int | None = None) -> DenseProblem:
    """Assemble the problem matrices explicitly (tiny instances only)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (model.n_x,):
        raise DimensionError(f"p: shape {p.shape}, expected ({model.n_x},)")
    if q.shape != (model.n_u,):
        raise DimensionError(f"q: shape {q.shape}, expected ({model.n_u},)")
    k = forecast.k if k is None else int(k)

    n_e = tree.n_edges
    n_vars = n_e * (model.n_x + model.n_u)
    if n_vars > MAX_DENSE_VARIABLES:
        raise ValidationError(
            f"dense oracle limited to {MAX_DENSE_VARIABLES} variables, got {n_vars}")

    demands = node_demands(tree, forecast)
    prob = DenseProblem(model=model, tree=tree, demands=demands, p=p, q=q, k=k,
                        F=np.zeros((n_vars, n_vars)), c=np.zeros(n_vars),
                        A_eq=np.empty(0), b_eq=np.empty(0),
                        n_x_vars=n_e * model.n_x, n_u_vars=n_e * model.n_u)

    stages = tree.edge_stage()
    pa_edge = tree.parent_edge()
    p_edge = tree.edge_prob

    # Smooth cost: economic linear term plus control-increment quadratic.
    for e in range(n_e):
        us = prob.u_slice(e)
        pe = p_edge[e]
        prob.c[us] += pe * model.W_alpha * model.price(k + stages[e])
        prob.F[us, us.start:us.stop] += pe * model.Wu
        if pa_edge[e] >= 0:
            ups = prob.u_slice(int(pa_edge[e]))
            prob.F[ups, ups.start:ups.stop] += pe * model.Wu
            prob.F[us, ups.start:ups.stop] -= pe * model.Wu
            prob.F[ups, us.start:us.stop] -= pe * model.Wu
        else:
            prob.c[us] += -2.0 * pe * (model.Wu @ q)

    # Equalities: node dynamics then edge junction balances.
    n_rows = n_e * model.n_x + n_e * model.n_e
    A_eq = np.zeros((n_rows, n_vars))
    b_eq = np.zeros(n_rows)
    row = 0
    for e in range(n_e):
        node = e + 1
        rows = slice(row, row + model.n_x)
        A_eq[rows, prob.x_slice(e)] = np.eye(model.n_x)
        A_eq[rows, prob.u_slice(e)] = -model.B
        b_eq[rows] = model.Gd @ demands[e]
        parent = int(tree.anc[node])
        if parent == 0:
            b_eq[rows] += model.A @ p
        else:
            A_eq[rows, prob.x_slice(parent - 1)] = -model.A
        row += model.n_x
    for e in range(n_e):
        rows = slice(row, row + model.n_e)
        A_eq[rows, prob.u_slice(e)] = model.E
        b_eq[rows] = -model.Ed @ demands[e]
        row += model.n_e

    if np.linalg.matrix_rank(A_eq) < n_rows:
        raise ValidationError("equality constraint matrix is row-rank deficient")
    prob.A_eq, prob.b_eq = A_eq, b_eq
    return prob


def _pairing_vector(prob: DenseProblem, w) -> np.ndarray:
    """Linear term <z, H'w> for a dual point with blocks (sig, zeta, psi)."""
    c = np.zeros(prob.n_vars)
    if w is None:
        return c
    for e in range(prob.tree.n_edges):
        c[prob.x_slice(e)] = w.sig[e] + w.zeta[e]
        c[prob.u_slice(e)] = w.psi[e]
    return c


def solve_dense_kkt(prob: DenseProblem, w=None) -> np.ndarray:
    """Exact KKT solution of the smooth equality-constrained inner problem.

    Minimizes ``z'Fz + (c + H'w)'z`` subject to ``A_eq z = b_eq`` by one dense
    symmetric-indefinite solve; the KKT residual is verified to 1e-9.
    """
    n, m = prob.n_vars, prob.b_eq.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = 2.0 * prob.F
    K[:n, n:] = prob.A_eq.T
    K[n:, :n] = prob.A_eq
    rhs = np.concatenate([-(prob.c + _pairing_vector(prob, w)), prob.b_eq])
    try:
        sol = scipy.linalg.solve(K, rhs, assume_a="sym")
    except scipy.linalg.LinAlgError as exc:
        raise ValidationError(f"singular KKT system: {exc}") from None
    resid = np.max(np.abs(K @ sol - rhs))
    if not np.isfinite(resid) or resid > 1e-9 * max(1.0, np.max(np.abs(rhs))):
        raise ValidationError(f"KKT residual too large: {resid:.3e}")
    return sol[:n]


# -- full soft-constrained problem ------------------------------------------

def _prox_distance_block(v: np.ndarray, proj: np.ndarray, weight: float) -> np.ndarray:
    """Prox of weight * euclidean distance to a set, given the projection."""
    gap = proj - v
    dist = float(np.linalg.norm(gap))
    if dist <= weight:
        return proj
    return v + (weight / dist) * gap


def _admm_factor(prob: DenseProblem, rho: float):
    n, m = prob.n_vars, prob.b_eq.shape[0]
    HtH = np.concatenate([np.full(prob.n_x_vars, 2.0), np.full(prob.n_u_vars, 1.0)])
    K = np.zeros((n + m, n + m))
    K[:n, :n] = 2.0 * prob.F + rho * np.diag(HtH)
    K[:n, n:] = prob.A_eq.T
    K[n:, :n] = prob.A_eq
    return scipy.linalg.lu_factor(K)


def solve_dense_full(prob: DenseProblem, iters: int = 20000,
                     rho: float | None = None, tol: float = 1e-11) -> np.ndarray:
    """Reference solution of the full nonsmooth problem.

    Splits the objective as smooth-plus-equalities against the separable soft
    penalties and control box, and alternates a dense KKT solve with
    closed-form proximal updates (ADMM with residual-balanced step).  Runs at
    most ``iters`` iterations, stopping early once both residuals fall below
    ``tol``; always returns the feasible-side iterate.
    """
    model, tree = prob.model, prob.tree
    n_e = tree.n_edges
    n = prob.n_vars
    m = prob.b_eq.shape[0]

    def apply_H(z):
        x, u = prob.split(z)
        return np.concatenate([x.ravel(), x.ravel(), u.ravel()])

    def apply_Ht(t):
        xs = prob.n_x_vars
        return np.concatenate([t[:xs] + t[xs:2 * xs], t[2 * xs:]])

    def prox_g(t, gamma):
        out = np.empty_like(t)
        xs = prob.n_x_vars
        sig = t[:xs].reshape(n_e, model.n_x)
        zet = t[xs:2 * xs].reshape(n_e, model.n_x)
        psi = t[2 * xs:].reshape(n_e, model.n_u)
        sig_out = np.empty_like(sig)
        zet_out = np.empty_like(zet)
        for e in range(n_e):
            sig_out[e] = _prox_distance_block(
                sig[e], np.maximum(sig[e], model.x_s), gamma * model.Wx)
            zet_out[e] = _prox_distance_block(
                zet[e], np.clip(zet[e], model.x_min, model.x_max), gamma * model.gamma_d)
        out[:xs] = sig_out.ravel()
        out[xs:2 * xs] = zet_out.ravel()
        out[2 * xs:] = np.clip(psi, model.u_min, model.u_max).ravel()
        return out

    if rho is None:
        rho = max(1.0, float(np.trace(prob.F)) / max(1, n))
    lu = _admm_factor(prob, rho)
    t = np.zeros(2 * prob.n_x_vars + prob.n_u_vars)
    lam = np.zeros_like(t)
    z = np.zeros(n)
    t_dim_scale = np.sqrt(t.shape[0])

    for it in range(int(iters)):
        rhs = np.concatenate([rho * apply_Ht(t - lam) - prob.c, prob.b_eq])
        z = scipy.linalg.lu_solve(lu, rhs)[:n]
        Hz = apply_H(z)
        t_prev = t
        t = prox_g(Hz + lam, 1.0 / rho)
        lam = lam + Hz - t
        r_primal = float(np.linalg.norm(Hz - t))
        r_dual = rho * float(np.linalg.norm(apply_Ht(t - t_prev)))
        scale = max(1.0, float(np.linalg.norm(Hz)), float(np.linalg.norm(t)))
        if r_primal <= tol * t_dim_scale * scale and r_dual <= tol * t_dim_scale * scale:
            break
        if (it + 1) % 100 == 0 and it + 1 < iters:
            # residual balancing keeps both residuals comparable
            if r_primal > 10.0 * r_dual:
                rho *= 2.0
                lam /= 2.0
                lu = _admm_factor(prob, rho)
            elif r_dual > 10.0 * r_primal:
                rho /= 2.0
                lam *= 2.0
                lu = _admm_factor(prob, rho)

    # report the point that satisfies equalities exactly, with controls
    # clamped onto the box (t holds the box-feasible copy)
    xs = prob.n_x_vars
    z_out = z.copy()
    z_out[xs:] = t[2 * xs:]
    return z_out


def dense_objective(prob: DenseProblem, z: np.ndarray) -> float:
    """Smooth plus soft-penalty objective at a stacked point (box excluded)."""
    model = prob.model
    x, _u = prob.split(z)
    val = float(z @ prob.F @ z + prob.c @ z)
    for e in range(prob.tree.n_edges):
        below = np.maximum(model.x_s - x[e], 0.0)
        val += model.Wx * float(np.linalg.norm(below))
        outside = x[e] - np.clip(x[e], model.x_min, model.x_max)
        val += model.gamma_d * float(np.linalg.norm(outside))
    return val
