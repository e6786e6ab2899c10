"""Junction-equality elimination by the change of variables u = L v + u_hat(d).

``L`` is an orthonormal basis of ker(E), so any v yields a junction-feasible
control once the particular solution ``u_hat(d)`` (minimum-norm solution of
``E u = -Ed d``) is added.  The reduced smooth cost in v is

    sum_e  pbar_e v_e' Rbar v_e  -  2 p_e v_pa(e)' Rbar v_e  +  beta_e' v_e

with Rbar = L' Wu L.  This module computes the basis once per model and the
per-solve vectors (u_hat, e, beta) once per forecast.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionError, ValidationError
from .model import NetworkModel
from .tree import ScenarioTree

__all__ = [
    "EliminationBasis",
    "StageCache",
    "compute_basis",
    "particular_solution",
    "build_stage_cache",
    "lift_controls",
]


@dataclass(frozen=True)
class EliminationBasis:
    """Nullspace basis of E plus the reduced control weights."""

    L: np.ndarray          # (n_u, n_v) orthonormal columns spanning ker(E)
    part_map: np.ndarray   # (n_u, n_d): u_hat(d) = part_map @ d (minimum norm)
    Rhat: np.ndarray       # Wu @ L, (n_u, n_v)
    Rbar: np.ndarray       # L' Wu L, (n_v, n_v), symmetric positive definite
    Rbar_chol: np.ndarray  # lower Cholesky factor of Rbar
    sigma: float           # strong-convexity modulus of one reduced block, 2*min eig(Rbar)

    @property
    def n_u(self) -> int:
        return self.L.shape[0]

    @property
    def n_v(self) -> int:
        return self.L.shape[1]


@dataclass
class StageCache:
    """Per-solve vectors tied to one (tree, forecast, time) triple."""

    k: int                 # absolute time of the solve
    q: np.ndarray          # previously applied control (root-edge predecessor)
    demands: np.ndarray    # (n_edges, n_d) node demand realizations
    uhat: np.ndarray       # (n_edges, n_u) particular solutions
    evec: np.ndarray       # (n_edges, n_x) demand-driven state offsets B uhat + Gd d
    beta: np.ndarray       # (n_edges, n_v) linear reduced-cost terms
    alpha_bar: np.ndarray  # (N, n_v) reduced price vectors per stage
    pbar: np.ndarray       # (n_edges,) p_e + sum of child edge probabilities


def compute_basis(model: NetworkModel) -> EliminationBasis:
    """Orthonormal nullspace basis of E and the reduced weights (one-time)."""
    E = model.E
    n_e, n_u = E.shape
    n_v = n_u - n_e
    if n_v < 1:
        raise ValidationError(
            "junction equations leave no control freedom (n_u - n_e < 1)")

    # Rank-revealing QR of E': the trailing columns of Q span ker(E).
    Q, R, _ = scipy.linalg.qr(E.T, pivoting=True)
    rank = int(np.sum(np.abs(np.diag(R)) > max(n_u, n_e) * np.finfo(float).eps
                      * abs(R[0, 0])))
    if rank < n_e:
        raise ValidationError("E not full row rank")
    L = Q[:, n_e:].copy()

    # Minimum-norm particular solution map: u_hat(d) = -E'(EE')^{-1} Ed d.
    EEt = E @ E.T
    part_map = -E.T @ scipy.linalg.cho_solve(scipy.linalg.cho_factor(EEt), model.Ed)

    Rhat = model.Wu @ L
    Rbar = L.T @ Rhat
    Rbar = 0.5 * (Rbar + Rbar.T)
    try:
        chol = scipy.linalg.cholesky(Rbar, lower=True)
    except scipy.linalg.LinAlgError:
        raise ValidationError("reduced weight matrix L'WuL not positive definite") from None
    sigma = 2.0 * float(scipy.linalg.eigvalsh(Rbar)[0])
    if sigma <= 0:
        raise ValidationError(f"reduced curvature not positive (sigma={sigma:.3e})")

    for arr in (L, part_map, Rhat, Rbar, chol):
        arr.setflags(write=False)
    return EliminationBasis(L=L, part_map=part_map, Rhat=Rhat, Rbar=Rbar,
                            Rbar_chol=chol, sigma=sigma)


def particular_solution(basis: EliminationBasis, model: NetworkModel, d) -> np.ndarray:
    """Minimum-norm u with ``E u = -Ed d``."""
    d = np.asarray(d, dtype=float)
    if d.shape != (model.n_d,):
        raise DimensionError(f"d: shape {d.shape}, expected ({model.n_d},)")
    return basis.part_map @ d


def build_stage_cache(basis: EliminationBasis, model: NetworkModel,
                      tree: ScenarioTree, demands: np.ndarray,
                      k: int, q) -> StageCache:
    """Per-node vectors for one solve: u_hat, e and the linear terms beta.

    ``demands`` is the (n_edges, n_d) array from ``node_demands`` for the same
    tree; ``q`` is the control applied at time k-1 (the root-edge
    predecessor).  beta collects the gradient of the reduced smooth cost at
    v = 0: for edge e with probability p_e and combined weight pbar_e,

        beta_e = p_e abar_stage(e)
                 + 2 Rhat' (pbar_e uhat_e - p_e uhat_pa(e) - sum_c p_c uhat_c)

    where the parent of a root edge is the fixed control q.
    """
    demands = np.asarray(demands, dtype=float)
    if demands.shape != (tree.n_edges, model.n_d):
        raise DimensionError(
            f"demands: shape {demands.shape}, expected ({tree.n_edges}, {model.n_d})")
    q = np.asarray(q, dtype=float)
    if q.shape != (model.n_u,):
        raise DimensionError(f"q: shape {q.shape}, expected ({model.n_u},)")

    uhat = demands @ basis.part_map.T
    evec = uhat @ model.B.T + demands @ model.Gd.T

    alpha_bar = np.empty((tree.N, basis.n_v))
    for j in range(tree.N):
        alpha_bar[j] = model.W_alpha * (basis.L.T @ model.price(k + j))

    p_edge = tree.edge_prob
    pa_edge = tree.parent_edge()
    child_prob_sum = np.zeros(tree.n_edges)
    inner = pa_edge >= 0
    np.add.at(child_prob_sum, pa_edge[inner], p_edge[inner])
    pbar = p_edge + child_prob_sum

    uhat_pa = np.where(inner[:, None], uhat[pa_edge], q[None, :])
    child_uhat_sum = np.zeros_like(uhat)
    np.add.at(child_uhat_sum, pa_edge[inner], p_edge[inner, None] * uhat[inner])

    combo = pbar[:, None] * uhat - p_edge[:, None] * uhat_pa - child_uhat_sum
    beta = p_edge[:, None] * alpha_bar[tree.edge_stage()] + 2.0 * (combo @ basis.Rhat)
    return StageCache(k=int(k), q=q.copy(), demands=demands, uhat=uhat,
                      evec=evec, beta=beta, alpha_bar=alpha_bar, pbar=pbar)


def lift_controls(basis: EliminationBasis, cache: StageCache, v: np.ndarray) -> np.ndarray:
    """Map reduced controls back to flows: ``u_e = L v_e + uhat_e`` per edge."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 2 or v.shape != (cache.uhat.shape[0], basis.n_v):
        raise DimensionError(
            f"v: shape {v.shape}, expected ({cache.uhat.shape[0]}, {basis.n_v})")
    return v @ basis.L.T + cache.uhat
