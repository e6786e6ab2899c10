"""Scenario tree: staged topology, probabilities and demand-error values.

Nodes are stored stage-major in flat arrays; the children of every node are
contiguous in the next stage.  Node 0 is the root.  Every non-root node at
stage j+1 doubles as the "edge" carrying the control and demand applied while
moving from its ancestor at stage j, so per-edge arrays are simply node arrays
with the root row dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParseError, ValidationError
from .model import _read_json

__all__ = [
    "ScenarioTree",
    "DemandForecast",
    "build_tree",
    "load_tree",
    "node_demands",
    "scenario_paths",
]

PROB_TOL = 1e-9


@dataclass(frozen=True)
class ScenarioTree:
    """Validated scenario tree.  Immutable; safe to share across threads."""

    N: int                    # horizon; stages run 0..N
    n_d: int                  # demand dimension of the error vectors
    stage_starts: np.ndarray  # (N+2,) offsets; stage j nodes live in [starts[j], starts[j+1])
    anc: np.ndarray           # (n_nodes,) ancestor node index; -1 for the root
    child_start: np.ndarray   # (n_nodes,) first child node index
    child_stop: np.ndarray    # (n_nodes,) one past last child; == child_start at leaves
    prob: np.ndarray          # (n_nodes,) visit probabilities
    eps: np.ndarray           # (n_nodes, n_d) demand errors; row 0 unused (zeros)

    @property
    def n_nodes(self) -> int:
        return self.anc.shape[0]

    @property
    def n_edges(self) -> int:
        return self.n_nodes - 1

    @property
    def n_s(self) -> int:
        """Number of leaves, i.e. scenarios."""
        return int(self.stage_starts[self.N + 1] - self.stage_starts[self.N])

    def stage_of(self, node: int) -> int:
        return int(np.searchsorted(self.stage_starts, node, side="right") - 1)

    def stage_slice(self, j: int) -> slice:
        return slice(int(self.stage_starts[j]), int(self.stage_starts[j + 1]))

    def node_counts(self) -> np.ndarray:
        """mu(j) for j = 0..N."""
        return np.diff(self.stage_starts)

    def branching_factors(self) -> np.ndarray:
        """Maximum branching factor per stage j = 0..N-1."""
        b = np.empty(self.N, dtype=int)
        counts = self.child_stop - self.child_start
        for j in range(self.N):
            b[j] = int(counts[self.stage_slice(j)].max())
        return b

    # Per-edge views: edge e corresponds to node e+1.
    @property
    def edge_prob(self) -> np.ndarray:
        return self.prob[1:]

    @property
    def edge_eps(self) -> np.ndarray:
        return self.eps[1:]

    def edge_stage(self) -> np.ndarray:
        """Stage j of each edge (control applied during step j -> j+1)."""
        out = np.empty(self.n_edges, dtype=np.int64)
        for j in range(1, self.N + 1):
            s = self.stage_slice(j)
            out[s.start - 1:s.stop - 1] = j - 1
        return out

    def parent_edge(self) -> np.ndarray:
        """For each edge, the edge above it, or -1 for root edges."""
        return self.anc[1:] - 1


@dataclass(frozen=True)
class DemandForecast:
    """Nominal demand predictions issued at absolute time k, one per stage."""

    dhat: np.ndarray  # (N, n_d)
    k: int = 0

    def __post_init__(self):
        dhat = np.asarray(self.dhat, dtype=float)
        if dhat.ndim != 2:
            raise ValidationError("forecast must be a (N, n_d) array")
        if not np.all(np.isfinite(dhat)):
            raise ValidationError("forecast contains non-finite entries")
        object.__setattr__(self, "dhat", dhat)

    @property
    def N(self) -> int:
        return self.dhat.shape[0]


def _validate_and_build(N, stage_starts, anc, prob, eps) -> ScenarioTree:
    stage_starts = np.asarray(stage_starts, dtype=np.int64)
    anc = np.asarray(anc, dtype=np.int64)
    prob = np.asarray(prob, dtype=float)
    eps = np.asarray(eps, dtype=float)
    n_nodes = anc.shape[0]
    bad = []

    if N < 1:
        bad.append("horizon N must be >= 1")
    if stage_starts[0] != 0 or stage_starts[-1] != n_nodes:
        bad.append("stage offsets do not cover the node arrays")
    if np.any(np.diff(stage_starts) < 1):
        bad.append("every stage must contain at least one node")
    if stage_starts[1] != 1:
        bad.append("stage 0 must contain exactly the root node")
    if bad:
        raise ValidationError(bad)

    if np.any(~np.isfinite(prob)):
        bad.append("probabilities must be finite")
    if np.any(prob <= 0):
        bad.append("probabilities must be strictly positive")
    if abs(prob[0] - 1.0) > PROB_TOL:
        bad.append(f"root probability must be 1, got {prob[0]!r}")
    if eps.shape[0] != n_nodes:
        bad.append(f"eps rows ({eps.shape[0]}) do not match node count ({n_nodes})")
    if not np.all(np.isfinite(eps)):
        bad.append("demand errors must be finite")

    # Ancestors: root has none; stage-j nodes point into stage j-1, grouped so
    # that each node's children are contiguous.
    if anc[0] != -1:
        bad.append("root node must have no ancestor")
    for j in range(1, N + 1):
        s, e = int(stage_starts[j]), int(stage_starts[j + 1])
        a = anc[s:e]
        lo, hi = int(stage_starts[j - 1]), int(stage_starts[j])
        if np.any((a < lo) | (a >= hi)):
            bad.append(f"stage {j}: ancestor index outside stage {j - 1}")
            continue
        if np.any(np.diff(a) < 0):
            bad.append(f"stage {j}: children of a node must be contiguous "
                       "(ancestor indices must be nondecreasing)")
            continue
        present = np.unique(a)
        if present.shape[0] != hi - lo:
            orphaned = sorted(set(range(lo, hi)) - set(present.tolist()))
            bad.append(f"stage {j - 1}: node(s) {orphaned} have no children")

    if bad:
        raise ValidationError(bad)

    # Child ranges from the grouped ancestor arrays.
    child_start = np.full(n_nodes, 0, dtype=np.int64)
    child_stop = np.full(n_nodes, 0, dtype=np.int64)
    leaf_lo = int(stage_starts[N])
    child_start[leaf_lo:] = n_nodes
    child_stop[leaf_lo:] = n_nodes
    for j in range(N):
        s, e = int(stage_starts[j]), int(stage_starts[j + 1])
        cs, ce = int(stage_starts[j + 1]), int(stage_starts[j + 2])
        a = anc[cs:ce]
        starts = cs + np.searchsorted(a, np.arange(s, e), side="left")
        stops = cs + np.searchsorted(a, np.arange(s, e), side="right")
        child_start[s:e] = starts
        child_stop[s:e] = stops

    # Probability conservation, stage sums and parent-child sums.
    for j in range(N + 1):
        sl = slice(int(stage_starts[j]), int(stage_starts[j + 1]))
        total = float(prob[sl].sum())
        if abs(total - 1.0) > PROB_TOL:
            bad.append(f"stage {j}: probabilities sum to {total!r}, expected 1")
    for n in range(leaf_lo):
        csum = float(prob[child_start[n]:child_stop[n]].sum())
        if abs(csum - prob[n]) > PROB_TOL:
            j = int(np.searchsorted(stage_starts, n, side="right") - 1)
            i = n - int(stage_starts[j])
            bad.append(f"children of node ({j},{i}) sum to {csum!r}, expected {prob[n]!r}")
    if bad:
        raise ValidationError(bad)

    eps = eps.copy()
    eps[0] = 0.0
    for arr in (stage_starts, anc, child_start, child_stop, prob, eps):
        arr.setflags(write=False)
    return ScenarioTree(N=int(N), n_d=int(eps.shape[1]),
                        stage_starts=stage_starts, anc=anc,
                        child_start=child_start, child_stop=child_stop,
                        prob=prob, eps=eps)


def build_tree(branching, eps_samples, probs, N: int) -> ScenarioTree:
    """Build a uniformly branching tree.

    ``branching`` lists the branching factors of the leading stages (length at
    most N); later stages branch with factor 1.  ``probs`` and ``eps_samples``
    are given per stage: ``probs[j]`` holds the mu(j) node probabilities of
    stage j (``probs[0]`` may be omitted by passing a stage list of length N),
    and ``eps_samples[j-1]`` the (mu(j), n_d) error vectors of stage j.
    """
    branching = [int(b) for b in branching]
    if len(branching) > N:
        raise ValidationError("branching list longer than the horizon")
    if any(b < 1 for b in branching):
        raise ValidationError("branching factors must be >= 1")
    factors = branching + [1] * (N - len(branching))

    counts = [1]
    for b in factors:
        counts.append(counts[-1] * b)
    stage_starts = np.concatenate([[0], np.cumsum(counts)])
    n_nodes = int(stage_starts[-1])

    probs = [np.asarray(p, dtype=float).ravel() for p in probs]
    if len(probs) == N:  # root probability omitted
        probs = [np.array([1.0])] + probs
    if len(probs) != N + 1:
        raise ValidationError(f"probs must cover stages 0..{N} (got {len(probs)} stages)")
    for j, p in enumerate(probs):
        if p.shape[0] != counts[j]:
            raise ValidationError(
                f"stage {j}: {p.shape[0]} probabilities for {counts[j]} nodes")

    eps_samples = [np.atleast_2d(np.asarray(e, dtype=float)) for e in eps_samples]
    if len(eps_samples) != N:
        raise ValidationError(f"eps_samples must cover stages 1..{N}")
    n_d = eps_samples[0].shape[1]
    for j, e in enumerate(eps_samples, start=1):
        if e.shape != (counts[j], n_d):
            raise ValidationError(
                f"stage {j}: eps block has shape {e.shape}, expected ({counts[j]}, {n_d})")

    anc = np.empty(n_nodes, dtype=np.int64)
    anc[0] = -1
    for j in range(1, N + 1):
        s, e = int(stage_starts[j]), int(stage_starts[j + 1])
        parents = np.arange(int(stage_starts[j - 1]), int(stage_starts[j]))
        anc[s:e] = np.repeat(parents, factors[j - 1])

    prob = np.concatenate(probs)
    eps = np.vstack([np.zeros((1, n_d))] + eps_samples)
    return _validate_and_build(N, stage_starts, anc, prob, eps)


def load_tree(source) -> ScenarioTree:
    """Load a tree from its JSON file format (see README)."""
    doc = _read_json(source, "tree file")
    if not isinstance(doc, dict) or "N" not in doc or "stages" not in doc:
        raise ParseError("tree file: expected an object with keys 'N' and 'stages'")
    try:
        N = int(doc["N"])
    except (TypeError, ValueError):
        raise ParseError("tree file: N must be an integer") from None
    stages = doc["stages"]
    if not isinstance(stages, list) or len(stages) != N + 1:
        raise ParseError(f"tree file: 'stages' must list {N + 1} stages")

    anc, prob, eps_rows = [], [], []
    stage_starts = [0]
    n_d = None
    for j, stage in enumerate(stages):
        nodes = stage.get("nodes") if isinstance(stage, dict) else None
        if not isinstance(nodes, list) or not nodes:
            raise ParseError(f"tree file: stage {j} must hold a non-empty 'nodes' array")
        base_prev = stage_starts[j - 1] if j > 0 else 0
        for rec in nodes:
            if not isinstance(rec, dict) or "prob" not in rec:
                raise ParseError(f"tree file: stage {j}: node records need a 'prob'")
            prob.append(float(rec["prob"]))
            a = rec.get("anc", None)
            if j == 0:
                anc.append(-1)
            else:
                if a is None:
                    raise ParseError(f"tree file: stage {j}: non-root node missing 'anc'")
                anc.append(base_prev + int(a))
            e = rec.get("eps")
            if j == 0:
                eps_rows.append(None)
            else:
                if e is None:
                    raise ParseError(f"tree file: stage {j}: non-root node missing 'eps'")
                row = np.asarray(e, dtype=float).ravel()
                if n_d is None:
                    n_d = row.shape[0]
                elif row.shape[0] != n_d:
                    raise ParseError("tree file: inconsistent eps dimensions")
                eps_rows.append(row)
        stage_starts.append(len(prob))

    if n_d is None:
        raise ParseError("tree file: no demand-error vectors found")
    eps = np.zeros((len(prob), n_d))
    for i, row in enumerate(eps_rows):
        if row is not None:
            eps[i] = row
    return _validate_and_build(N, np.asarray(stage_starts), np.asarray(anc),
                               np.asarray(prob), eps)


def node_demands(tree: ScenarioTree, forecast: DemandForecast) -> np.ndarray:
    """Per-edge demand realizations ``d = dhat[stage] + eps[node]``.

    Row e corresponds to node e+1, i.e. the demand acting while the system
    moves into that node.
    """
    if forecast.N != tree.N:
        raise DimensionError(
            f"forecast horizon {forecast.N} does not match tree horizon {tree.N}")
    if forecast.dhat.shape[1] != tree.n_d:
        raise DimensionError(
            f"forecast dimension {forecast.dhat.shape[1]} does not match tree n_d {tree.n_d}")
    return forecast.dhat[tree.edge_stage()] + tree.edge_eps


def scenario_paths(tree: ScenarioTree) -> list[list[int]]:
    """Root-to-leaf node index paths, one per scenario."""
    paths = []
    for leaf in range(int(tree.stage_starts[tree.N]), tree.n_nodes):
        path = [leaf]
        node = leaf
        while tree.anc[node] >= 0:
            node = int(tree.anc[node])
            path.append(node)
        paths.append(path[::-1])
    return paths
