"""Flow-based water-network model: dynamics, junction coupling and stage costs.

The plant is a linear mass-balance system

    x[k+1] = A x[k] + B u[k] + Gd d[k]

coupled with an algebraic junction balance ``E u[k] + Ed d[k] = 0`` that every
admissible control must satisfy instantaneously.  States are stored volumes,
inputs are pump/valve flows, and ``d`` collects consumer demands.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParseError, ValidationError

__all__ = [
    "NetworkModel",
    "StageCost",
    "load_network",
    "simulate_step",
    "junction_residual",
    "stage_cost",
]


@dataclass(frozen=True)
class NetworkModel:
    """Validated network data.  Immutable; safe to share across threads."""

    A: np.ndarray
    B: np.ndarray
    Gd: np.ndarray
    E: np.ndarray
    Ed: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    x_min: np.ndarray
    x_max: np.ndarray
    x_s: np.ndarray
    alpha1: np.ndarray
    alpha2_schedule: np.ndarray  # (period, n_u), indexed by absolute time mod period
    W_alpha: float
    Wu: np.ndarray
    Wx: float
    gamma_d: float

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_d(self) -> int:
        return self.Gd.shape[1]

    @property
    def n_e(self) -> int:
        return self.E.shape[0]

    def alpha2(self, k: int) -> np.ndarray:
        """Electricity price vector at absolute time ``k`` (periodic schedule)."""
        return self.alpha2_schedule[k % self.alpha2_schedule.shape[0]]

    def price(self, k: int) -> np.ndarray:
        """Total per-flow price ``alpha1 + alpha2[k]``."""
        return self.alpha1 + self.alpha2(k)


@dataclass(frozen=True)
class StageCost:
    """Stage-cost components, all in economic units."""

    economic: float   # price-weighted flow cost, may be negative for negative flows
    smoothing: float  # quadratic control-increment penalty, >= 0
    safety: float     # weighted distance below the safety level, >= 0

    @property
    def total(self) -> float:
        return self.economic + self.smoothing + self.safety


_MATRIX_KEYS = ("A", "B", "Gd", "E", "Ed", "Wu")
_VECTOR_KEYS = ("u_min", "u_max", "x_min", "x_max", "x_s", "alpha1")
_SCALAR_KEYS = ("W_alpha", "Wx", "gamma_d")


def _as_matrix(raw, key):
    try:
        arr = np.asarray(raw, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{key}: not numeric: {exc}") from None
    if arr.ndim != 2:
        raise ParseError(f"{key}: expected a matrix (array of row arrays), got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"{key}: contains non-finite entries")
    return arr


def _as_vector(raw, key):
    try:
        arr = np.asarray(raw, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{key}: not numeric: {exc}") from None
    if arr.ndim != 1:
        raise ParseError(f"{key}: expected a flat array, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"{key}: contains non-finite entries")
    return arr


def load_network(source) -> NetworkModel:
    """Parse and validate a network file.

    ``source`` may be a path, a byte/text stream, or raw bytes/str holding a
    single JSON document (see README for the schema).  Raises ``ParseError``
    on malformed input and ``ValidationError`` listing every violated
    invariant otherwise.
    """
    doc = _read_json(source, "network file")
    if not isinstance(doc, dict):
        raise ParseError("network file: top-level value must be an object")

    required = set(_MATRIX_KEYS) | set(_VECTOR_KEYS) | set(_SCALAR_KEYS) | {"alpha2_schedule"}
    missing = sorted(required - doc.keys())
    if missing:
        raise ParseError(f"network file: missing keys: {', '.join(missing)}")

    mats = {k: _as_matrix(doc[k], k) for k in _MATRIX_KEYS}
    vecs = {k: _as_vector(doc[k], k) for k in _VECTOR_KEYS}
    scalars = {}
    for k in _SCALAR_KEYS:
        try:
            scalars[k] = float(doc[k])
        except (TypeError, ValueError):
            raise ParseError(f"{k}: expected a number") from None
        if not np.isfinite(scalars[k]):
            raise ParseError(f"{k}: not finite")

    sched = _as_matrix(doc["alpha2_schedule"], "alpha2_schedule")

    model = NetworkModel(
        A=mats["A"], B=mats["B"], Gd=mats["Gd"], E=mats["E"], Ed=mats["Ed"],
        u_min=vecs["u_min"], u_max=vecs["u_max"],
        x_min=vecs["x_min"], x_max=vecs["x_max"], x_s=vecs["x_s"],
        alpha1=vecs["alpha1"], alpha2_schedule=sched,
        Wu=mats["Wu"],
        W_alpha=scalars["W_alpha"], Wx=scalars["Wx"], gamma_d=scalars["gamma_d"],
    )
    violations = validate_model(model)
    if violations:
        raise ValidationError(violations)
    for arr in (model.A, model.B, model.Gd, model.E, model.Ed, model.u_min,
                model.u_max, model.x_min, model.x_max, model.x_s, model.alpha1,
                model.alpha2_schedule, model.Wu):
        arr.setflags(write=False)
    return model


def _read_json(source, what):
    try:
        if isinstance(source, (str, os.PathLike)) and not _looks_like_json(source):
            with open(source, "rb") as fh:
                return json.load(fh)
        if isinstance(source, bytes):
            return json.loads(source.decode("utf-8"))
        if isinstance(source, str):
            return json.loads(source)
        if isinstance(source, io.IOBase) or hasattr(source, "read"):
            return json.load(source)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{what}: invalid JSON: {exc}") from None
    raise ParseError(f"{what}: unsupported source type {type(source).__name__}")


def _looks_like_json(s) -> bool:
    return isinstance(s, str) and s.lstrip()[:1] in ("{", "[")


def validate_model(m: NetworkModel) -> list[str]:
    """Return a list of violated invariants (empty when the model is valid)."""
    bad = []
    n_x, n_u, n_d, n_e = m.A.shape[0], m.B.shape[1], m.Gd.shape[1], m.E.shape[0]

    if m.A.shape != (n_x, n_x):
        bad.append(f"A must be square, got {m.A.shape}")
    if m.B.shape[0] != n_x:
        bad.append(f"B has {m.B.shape[0]} rows, expected n_x={n_x}")
    if m.Gd.shape[0] != n_x:
        bad.append(f"Gd has {m.Gd.shape[0]} rows, expected n_x={n_x}")
    if m.E.shape[1] != n_u:
        bad.append(f"E has {m.E.shape[1]} columns, expected n_u={n_u}")
    if m.Ed.shape != (n_e, n_d):
        bad.append(f"Ed shape {m.Ed.shape}, expected ({n_e}, {n_d})")
    if n_e < 1:
        bad.append("network must have at least one junction (n_e >= 1)")
    for key, vec, dim in (
        ("u_min", m.u_min, n_u), ("u_max", m.u_max, n_u),
        ("x_min", m.x_min, n_x), ("x_max", m.x_max, n_x),
        ("x_s", m.x_s, n_x), ("alpha1", m.alpha1, n_u),
    ):
        if vec.shape != (dim,):
            bad.append(f"{key} has shape {vec.shape}, expected ({dim},)")
    if m.alpha2_schedule.ndim != 2 or m.alpha2_schedule.shape[1] != n_u:
        bad.append(f"alpha2_schedule must be (period, n_u={n_u}), got {m.alpha2_schedule.shape}")
    elif m.alpha2_schedule.shape[0] < 1:
        bad.append("alpha2_schedule must contain at least one price vector")
    if m.Wu.shape != (n_u, n_u):
        bad.append(f"Wu shape {m.Wu.shape}, expected ({n_u}, {n_u})")

    if bad:
        return bad  # shape errors make the value checks below meaningless

    if np.any(m.u_min > m.u_max):
        bad.append("u_min > u_max in some component")
    if np.any(m.x_min > m.x_max):
        bad.append("x_min > x_max in some component")
    if np.any(m.x_s < m.x_min) or np.any(m.x_s > m.x_max):
        bad.append("safety level x_s must satisfy x_min <= x_s <= x_max elementwise")

    if not np.allclose(m.Wu, m.Wu.T, atol=1e-10):
        bad.append("Wu not symmetric")
    else:
        eig_min = float(np.linalg.eigvalsh(m.Wu)[0])
        if eig_min <= 0.0:
            bad.append(f"Wu not positive definite (min eigenvalue {eig_min:.3e})")

    if np.linalg.matrix_rank(m.E) < n_e:
        bad.append("E not full row rank")

    if m.W_alpha <= 0:
        bad.append("W_alpha must be positive")
    if m.Wx <= 0:
        bad.append("Wx must be positive")
    if m.gamma_d <= 0:
        bad.append("gamma_d must be positive")
    return bad


def _check_dims(name, arr, expected):
    if arr.shape != expected:
        raise DimensionError(f"{name}: shape {arr.shape}, expected {expected}")


def simulate_step(model: NetworkModel, x, u, d) -> np.ndarray:
    """One plant step ``A x + B u + Gd d``.

    No clamping: physical saturation belongs to the controller's constraints,
    not to the plant map.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    d = np.asarray(d, dtype=float)
    _check_dims("x", x, (model.n_x,))
    _check_dims("u", u, (model.n_u,))
    _check_dims("d", d, (model.n_d,))
    return model.A @ x + model.B @ u + model.Gd @ d


def junction_residual(model: NetworkModel, u, d) -> np.ndarray:
    """Junction balance ``E u + Ed d``; zero iff (u, d) is junction-feasible."""
    u = np.asarray(u, dtype=float)
    d = np.asarray(d, dtype=float)
    _check_dims("u", u, (model.n_u,))
    _check_dims("d", d, (model.n_d,))
    return model.E @ u + model.Ed @ d


def safety_distance(model: NetworkModel, x) -> float:
    """Euclidean distance of ``x`` to the safe set ``{x >= x_s}``."""
    shortfall = np.maximum(model.x_s - np.asarray(x, dtype=float), 0.0)
    return float(np.linalg.norm(shortfall))


def stage_cost(model: NetworkModel, x, u, u_prev, k: int) -> StageCost:
    """Stage cost at time ``k``: economic + smoothing + safety components."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    _check_dims("x", x, (model.n_x,))
    _check_dims("u", u, (model.n_u,))
    _check_dims("u_prev", u_prev, (model.n_u,))
    if k < 0:
        raise ValueError("time index k must be nonnegative")
    du = u - u_prev
    return StageCost(
        economic=float(model.W_alpha * (model.price(k) @ u)),
        smoothing=float(du @ model.Wu @ du),
        safety=float(model.Wx * safety_distance(model, x)),
    )
