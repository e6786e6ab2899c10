"""Node-indexed vectors flowing through the solver.

All arrays are stage-major over the tree.  ``x`` covers every node (root
included); ``u`` and the split/dual blocks cover the non-root nodes, i.e. one
row per tree edge, aligned so that row e belongs to node e+1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["PrimalPoint", "SplitPoint", "DualPoint"]


@dataclass
class PrimalPoint:
    """States over all nodes and controls over all edges."""

    x: np.ndarray  # (n_nodes, n_x)
    u: np.ndarray  # (n_edges, n_u)

    def copy(self) -> "PrimalPoint":
        return PrimalPoint(self.x.copy(), self.u.copy())


@dataclass
class SplitPoint:
    """Copied variables t = (sig, zeta, psi): two state copies and one input copy."""

    sig: np.ndarray   # (n_edges, n_x), copies of x at stages 1..N
    zeta: np.ndarray  # (n_edges, n_x)
    psi: np.ndarray   # (n_edges, n_u)

    def copy(self) -> "SplitPoint":
        return SplitPoint(self.sig.copy(), self.zeta.copy(), self.psi.copy())


@dataclass
class DualPoint:
    """Multipliers mirroring a SplitPoint."""

    sig: np.ndarray   # (n_edges, n_x)
    zeta: np.ndarray  # (n_edges, n_x)
    psi: np.ndarray   # (n_edges, n_u)

    def copy(self) -> "DualPoint":
        return DualPoint(self.sig.copy(), self.zeta.copy(), self.psi.copy())

    @classmethod
    def zeros(cls, n_edges: int, n_x: int, n_u: int) -> "DualPoint":
        return cls(np.zeros((n_edges, n_x)), np.zeros((n_edges, n_x)),
                   np.zeros((n_edges, n_u)))

    def xi(self) -> np.ndarray:
        """State-copy pair sum sig + zeta, the multiplier hitting each state."""
        return self.sig + self.zeta
