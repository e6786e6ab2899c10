"""Offline factor step and the stage-parallel online solve step.

The factor step computes, once per model, the matrices that the dynamic
program reuses every iteration:

    Bbar = B L,   Lam = -Rbar^{-1},   Phi = Lam Bbar',   Psi = Lam L'.

Rbar is held as its Cholesky factor and Lam is only ever applied through
triangular solves.  The solve step then evaluates the exact minimizer of the
smooth inner problem for a given dual vector w by one backward and one forward
sweep over the tree.  Within a stage every node is independent; nodes are
processed in fixed contiguous chunks so that multi-threaded runs are bitwise
identical to single-threaded ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from threadpoolctl import threadpool_limits

from ._parallel import WorkerPool, chunk_bounds
from .elimination import EliminationBasis, StageCache
from .errors import DimensionError
from .model import NetworkModel
from .points import DualPoint, PrimalPoint
from .tree import ScenarioTree

__all__ = ["FactorCache", "factor_step", "solve_step", "SolveContext"]

# Fixed number of node chunks per stage; boundaries depend only on the tree,
# which keeps reductions and writes deterministic across thread counts.
CHUNKS_PER_STAGE = 8


@dataclass(frozen=True)
class FactorCache:
    """Tree-independent matrices computed once per model."""

    Bbar: np.ndarray       # (n_x, n_v) = B L
    Phi: np.ndarray        # (n_v, n_x) = Lam Bbar'
    Psi: np.ndarray        # (n_v, n_u) = Lam L'
    Rbar_chol: np.ndarray  # lower Cholesky factor of Rbar (applies Lam)
    A: np.ndarray
    L: np.ndarray

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.L.shape[0]

    @property
    def n_v(self) -> int:
        return self.L.shape[1]

    def apply_lambda(self, X: np.ndarray) -> np.ndarray:
        """Apply Lam = -Rbar^{-1} to the rows of X via triangular solves."""
        Y = scipy.linalg.cho_solve((self.Rbar_chol, True), X.T, check_finite=False)
        return -Y.T


def factor_step(basis: EliminationBasis, model: NetworkModel) -> FactorCache:
    """One-time factor step; independent of the scenario tree."""
    Bbar = model.B @ basis.L
    chol = basis.Rbar_chol
    Phi = -scipy.linalg.cho_solve((chol, True), Bbar.T.copy())  # (n_v, n_x)
    Psi = -scipy.linalg.cho_solve((chol, True), basis.L.T.copy())  # (n_v, n_u)
    for arr in (Bbar, Phi, Psi):
        arr.setflags(write=False)
    return FactorCache(Bbar=Bbar, Phi=Phi, Psi=Psi, Rbar_chol=chol,
                       A=model.A, L=basis.L)


class SolveContext:
    """Workspace and chunk plan bound to one (factor, tree) pair.

    Reused across iterations by the engine; owns the worker pool.  Not
    thread-safe for concurrent solves, but may be handed between threads.
    """

    def __init__(self, factor: FactorCache, tree: ScenarioTree, threads: int = 1):
        self.factor = factor
        self.tree = tree
        self.threads = max(1, int(threads))
        n_nodes, n_edges = tree.n_nodes, tree.n_edges
        n_x, n_v, n_u = factor.n_x, factor.n_v, factor.n_u

        self.r_node = np.zeros((n_nodes, n_v))
        self.q_node = np.zeros((n_nodes, n_x))
        self.delta = np.empty((n_edges, n_v))
        self.v = np.empty((n_edges, n_v))
        self.x = np.empty((n_nodes, n_x))
        self.u = np.empty((n_edges, n_u))

        self.A_T = factor.A.T.copy()
        self.Bbar_T = factor.Bbar.T.copy()
        self.L_T = factor.L.T.copy()

        self.inv2p = 1.0 / (2.0 * tree.edge_prob)
        self.parent_edge = tree.parent_edge()

        # Backward plan: per stage j = N-1..0, chunks over the parent nodes of
        # stage j with their contiguous child (edge) ranges.
        self.backward_plan = []
        ss = tree.stage_starts
        for j in range(tree.N - 1, -1, -1):
            ps, pe = int(ss[j]), int(ss[j + 1])
            tasks = []
            for (a, b) in chunk_bounds(pe - ps, CHUNKS_PER_STAGE):
                pa, pb = ps + a, ps + b
                ea = int(tree.child_start[pa]) - 1   # edge rows = node index - 1
                eb = int(tree.child_stop[pb - 1]) - 1
                tasks.append((pa, pb, ea, eb))
            self.backward_plan.append((j, tasks))

        # Forward plan: per stage j = 0..N-1, chunks over that stage's edges.
        self.forward_plan = []
        for j in range(tree.N):
            es, ee = int(ss[j + 1]) - 1, int(ss[j + 2]) - 1
            tasks = [(es + a, es + b) for (a, b) in chunk_bounds(ee - es, CHUNKS_PER_STAGE)]
            self.forward_plan.append((j, tasks))

        self.pool = WorkerPool(self.threads)

    def close(self):
        self.pool.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    # -- kernels -----------------------------------------------------------

    def _backward_chunk(self, w: DualPoint, cache: StageCache,
                        pa: int, pb: int, ea: int, eb: int):
        rows = slice(ea, eb)
        nodes = slice(ea + 1, eb + 1)
        fac = self.factor
        xiq = w.sig[rows] + w.zeta[rows]
        xiq += self.q_node[nodes]
        g = cache.beta[rows] + self.r_node[nodes]
        g += xiq @ fac.Bbar
        g += w.psi[rows] @ fac.L
        # v offset: (1 / 2p) * Lam (Bbar'(xi+q) + L'psi + beta + r)
        np.multiply(fac.apply_lambda(g), self.inv2p[rows, None], out=self.delta[rows])
        offs = (self.tree.child_start[pa:pb] - (ea + 1)).astype(np.intp)
        np.add.reduceat(g, offs, axis=0, out=self.r_node[pa:pb])
        np.dot(np.add.reduceat(xiq, offs, axis=0), fac.A, out=self.q_node[pa:pb])

    def _forward_chunk(self, cache: StageCache, first_stage: bool, ea: int, eb: int):
        rows = slice(ea, eb)
        nodes = slice(ea + 1, eb + 1)
        if first_stage:
            self.v[rows] = self.delta[rows]
        else:
            np.add(self.delta[rows], self.v[self.parent_edge[rows]], out=self.v[rows])
        vv = self.v[rows]
        np.add(vv @ self.L_T, cache.uhat[rows], out=self.u[rows])
        xs = self.x[self.tree.anc[nodes]] @ self.A_T
        xs += vv @ self.Bbar_T
        xs += cache.evec[rows]
        self.x[nodes] = xs

    # -- sweeps ------------------------------------------------------------

    def solve(self, cache: StageCache, w: DualPoint, p: np.ndarray) -> PrimalPoint:
        """Backward then forward sweep; returns views into the workspace."""
        leaf_lo = int(self.tree.stage_starts[self.tree.N])
        self.r_node[leaf_lo:] = 0.0
        self.q_node[leaf_lo:] = 0.0
        for _j, tasks in self.backward_plan:
            self.pool.run(lambda *t: self._backward_chunk(w, cache, *t), tasks)
        self.x[0] = p
        for j, tasks in self.forward_plan:
            first = (j == 0)
            self.pool.run(lambda *t: self._forward_chunk(cache, first, *t), tasks)
        return PrimalPoint(self.x, self.u)


def _check_dual_shapes(tree: ScenarioTree, factor: FactorCache, w: DualPoint):
    n_e = tree.n_edges
    if w.sig.shape != (n_e, factor.n_x) or w.zeta.shape != (n_e, factor.n_x):
        raise DimensionError(
            f"dual state copies shaped {w.sig.shape}, expected ({n_e}, {factor.n_x})")
    if w.psi.shape != (n_e, factor.n_u):
        raise DimensionError(
            f"dual input copy shaped {w.psi.shape}, expected ({n_e}, {factor.n_u})")


def solve_step(factor: FactorCache, cache: StageCache, tree: ScenarioTree,
               w: DualPoint, p, q=None, threads: int = 1) -> PrimalPoint:
    """Exact minimizer of ``<z, H'w> + f(z)`` over the tree.

    ``p`` is the measured state at the root; the previously applied control
    enters through the cache's root-edge linear terms, so ``q`` is accepted
    only to assert consistency with the cache.  Returns fresh arrays.
    """
    _check_dual_shapes(tree, factor, w)
    if cache.beta.shape[0] != tree.n_edges:
        raise DimensionError("stage cache does not match the tree shape")
    p = np.asarray(p, dtype=float)
    if p.shape != (factor.n_x,):
        raise DimensionError(f"p: shape {p.shape}, expected ({factor.n_x},)")
    if q is not None and not np.array_equal(np.asarray(q, dtype=float), cache.q):
        raise DimensionError("q differs from the control the cache was built with")
    with threadpool_limits(limits=1):
        with SolveContext(factor, tree, threads=threads) as ctx:
            out = ctx.solve(cache, w, p)
            return PrimalPoint(out.x.copy(), out.u.copy())
