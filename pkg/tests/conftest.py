"""Shared fixtures: paths to shipped data and a tiny random instance factory."""

import pathlib

import numpy as np
import pytest

from treesmpc import (DemandForecast, NetworkModel, ScenarioTree, build_tree,
                      node_demands)

DATA_DIR = pathlib.Path(__file__).resolve().parents[1] / "data"


@pytest.fixture(scope="session")
def data_dir():
    return DATA_DIR


def make_model(rng, n_x=3, n_u=4, n_d=2, n_e=1, period=4,
               wx=None, gamma_d=None, hetero=1.0):
    """Random valid NetworkModel with junction-feasible headroom.

    ``hetero`` > 1 spreads tank scales to make preconditioning matter.
    """
    scale_x = hetero ** rng.uniform(-1.0, 1.0, size=n_x)
    A = np.eye(n_x) * rng.uniform(0.9, 1.0, size=n_x)
    B = rng.uniform(-1.0, 1.0, size=(n_x, n_u)) * scale_x[:, None]
    Gd = rng.uniform(-1.0, 0.0, size=(n_x, n_d)) * scale_x[:, None]
    E = rng.uniform(0.5, 1.5, size=(n_e, n_u)) * rng.choice([-1.0, 1.0], size=(n_e, n_u))
    while np.linalg.matrix_rank(E) < n_e:
        E = rng.uniform(0.5, 1.5, size=(n_e, n_u))
    Ed = rng.uniform(-1.0, 1.0, size=(n_e, n_d))

    u_cap = rng.uniform(2.0, 5.0, size=n_u)
    x_max = rng.uniform(6.0, 12.0, size=n_x) * scale_x
    x_s = rng.uniform(0.15, 0.35, size=n_x) * x_max
    M = rng.standard_normal((n_u, n_u))
    Wu = M @ M.T / n_u + np.eye(n_u) * rng.uniform(0.3, 1.0)

    return NetworkModel(
        A=A, B=B, Gd=Gd, E=E, Ed=Ed,
        u_min=-u_cap, u_max=u_cap,
        x_min=np.zeros(n_x), x_max=x_max, x_s=x_s,
        alpha1=rng.uniform(0.1, 1.0, size=n_u),
        alpha2_schedule=rng.uniform(0.0, 0.8, size=(period, n_u)),
        W_alpha=1.0,
        Wu=Wu,
        Wx=wx if wx is not None else rng.uniform(0.5, 3.0),
        gamma_d=gamma_d if gamma_d is not None else rng.uniform(0.5, 3.0),
    )


def make_tree(rng, branching, N, n_d=2, eps_scale=0.3):
    """Random tree with the given branching and positive random probabilities."""
    counts = [1]
    factors = list(branching) + [1] * (N - len(branching))
    for b in factors:
        counts.append(counts[-1] * b)
    probs = [np.array([1.0])]
    for j in range(1, N + 1):
        b = factors[j - 1]
        stage = []
        for p_parent in probs[j - 1]:
            w = rng.uniform(0.2, 1.0, size=b)
            stage.extend(p_parent * w / w.sum())
        probs.append(np.array(stage))
    eps = [rng.uniform(-eps_scale, eps_scale, size=(counts[j], n_d))
           for j in range(1, N + 1)]
    return build_tree(branching, eps, probs, N)


def make_instance(seed, n_x=None, n_u=None, n_e=1, N=None, branching=None,
                  hetero=1.0, wx=None, gamma_d=None, eps_scale=0.25,
                  enforce_cap=True):
    """Seeded random (model, tree, forecast, p, q) within the small-instance family."""
    rng = np.random.default_rng(seed)
    n_x = n_x if n_x is not None else int(rng.integers(2, 5))
    n_u = n_u if n_u is not None else int(rng.integers(n_e + 2, 7))
    n_d = 2
    N = N if N is not None else int(rng.integers(2, 5))
    if branching is None:
        choices = [[2], [2, 2], [3, 2], [2, 2, 2], [3], [4, 2]]
        branching = choices[int(rng.integers(0, len(choices)))]
        branching = branching[:N]
    # stay inside the dense-oracle variable cap
    def n_edges(bf):
        counts, c = 0, 1
        factors = list(bf) + [1] * (N - len(bf))
        for b in factors:
            c *= b
            counts += c
        return counts
    while (enforce_cap and n_edges(branching) * (n_x + n_u) > 200
           and (len(branching) > 1 or branching[0] > 2)):
        branching = branching[:-1] if len(branching) > 1 else [2]
    model = make_model(rng, n_x=n_x, n_u=n_u, n_d=n_d, n_e=n_e,
                       hetero=hetero, wx=wx, gamma_d=gamma_d)
    tree = make_tree(rng, branching, N, n_d=n_d, eps_scale=eps_scale)
    forecast = DemandForecast(rng.uniform(0.2, 1.0, size=(N, n_d)), k=int(rng.integers(0, 4)))
    p = rng.uniform(0.3, 0.7) * (model.x_min + model.x_max)
    q = rng.uniform(-0.3, 0.3, size=n_u) * model.u_max
    return model, tree, forecast, p, q


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
