import numpy as np
import pytest

from treesmpc import DemandForecast, build_tree
from treesmpc.errors import ValidationError
from treesmpc.model import NetworkModel
from treesmpc.oracle import (build_dense, dense_objective, solve_dense_full,
                             solve_dense_kkt)
from treesmpc.points import DualPoint

from conftest import make_instance, make_model


def test_variable_counts():
    model, tree, forecast, p, q = make_instance(0, branching=[2], N=2)
    prob = build_dense(model, tree, forecast, p, q)
    assert prob.n_vars == tree.n_edges * (model.n_x + model.n_u)
    assert prob.A_eq.shape[0] == tree.n_edges * (model.n_x + model.n_e)


def test_forward_simulated_point_is_feasible():
    # construct a feasible point by simulating controls through the tree and
    # check that it satisfies the assembled equalities
    model, tree, forecast, p, q = make_instance(1)
    prob = build_dense(model, tree, forecast, p, q)
    rng = np.random.default_rng(0)
    from treesmpc import compute_basis, lift_controls, build_stage_cache, node_demands
    basis = compute_basis(model)
    demands = node_demands(tree, forecast)
    cache = build_stage_cache(basis, model, tree, demands, k=forecast.k, q=q)
    v = rng.standard_normal((tree.n_edges, basis.n_v))
    u = lift_controls(basis, cache, v)
    x = np.empty((tree.n_nodes, model.n_x))
    x[0] = p
    for e in range(tree.n_edges):
        node = e + 1
        x[node] = model.A @ x[int(tree.anc[node])] + model.B @ u[e] + model.Gd @ demands[e]
    z = np.concatenate([x[1:].ravel(), u.ravel()])
    assert np.max(np.abs(prob.A_eq @ z - prob.b_eq)) <= 1e-10


def test_size_cap_enforced():
    model, tree, forecast, p, q = make_instance(2, branching=[4, 4], N=4,
                                                n_x=4, n_u=6, enforce_cap=False)
    with pytest.raises(ValidationError, match="200"):
        build_dense(model, tree, forecast, p, q)


def test_kkt_zero_linear_term_feasible_origin():
    # with zero demands, zero prices and q = 0, the origin is optimal
    model, tree, forecast, p, q = make_instance(3, eps_scale=0.0)
    model = NetworkModel(**{**model.__dict__,
                            "alpha1": np.zeros(model.n_u),
                            "alpha2_schedule": np.zeros((2, model.n_u))})
    forecast = DemandForecast(np.zeros_like(forecast.dhat), k=0)
    prob = build_dense(model, tree, forecast, np.zeros(model.n_x),
                       np.zeros(model.n_u))
    z = solve_dense_kkt(prob)
    assert np.max(np.abs(z)) <= 1e-10


def test_kkt_perturbation_linearity():
    # QP sensitivity: the solution is affine in the linear term
    model, tree, forecast, p, q = make_instance(4)
    prob = build_dense(model, tree, forecast, p, q)
    rng = np.random.default_rng(1)
    n_e = tree.n_edges
    w1 = DualPoint(rng.standard_normal((n_e, model.n_x)),
                   rng.standard_normal((n_e, model.n_x)),
                   rng.standard_normal((n_e, model.n_u)))
    w2 = DualPoint(rng.standard_normal((n_e, model.n_x)),
                   rng.standard_normal((n_e, model.n_x)),
                   rng.standard_normal((n_e, model.n_u)))
    z0 = solve_dense_kkt(prob)
    z1 = solve_dense_kkt(prob, w1)
    z2 = solve_dense_kkt(prob, w2)
    w12 = DualPoint(w1.sig + w2.sig, w1.zeta + w2.zeta, w1.psi + w2.psi)
    z12 = solve_dense_kkt(prob, w12)
    np.testing.assert_allclose(z12 - z0, (z1 - z0) + (z2 - z0),
                               atol=1e-8 * max(1, np.abs(z12).max()))


def test_full_agrees_with_kkt_when_inactive():
    # huge boxes and a deep safety level keep every nonsmooth term inactive
    model, tree, forecast, p, q = make_instance(5)
    wide = NetworkModel(**{**model.__dict__,
                           "u_min": np.full(model.n_u, -1e7),
                           "u_max": np.full(model.n_u, 1e7),
                           "x_min": np.full(model.n_x, -1e7),
                           "x_max": np.full(model.n_x, 1e7),
                           "x_s": np.full(model.n_x, -9e6)})
    prob = build_dense(wide, tree, forecast, p, q)
    z_kkt = solve_dense_kkt(prob)
    z_full = solve_dense_full(prob, iters=20000)
    assert np.max(np.abs(z_full - z_kkt)) <= 1e-7 * max(1.0, np.abs(z_kkt).max())


def test_full_pure_box_case():
    # redundant junction (E u = 0 automatically at the symmetric optimum) and
    # no soft terms: the solution clamps the unconstrained optimum
    rng = np.random.default_rng(6)
    n_u = 2
    model = make_model(rng, n_x=1, n_u=n_u, n_d=1, n_e=1)
    model = NetworkModel(**{**model.__dict__,
                            "E": np.array([[1.0, -1.0]]),
                            "Ed": np.array([[0.0]]),
                            "B": np.array([[0.3, 0.3]]),
                            "Gd": np.array([[0.0]]),
                            "Wu": np.eye(2),
                            "alpha1": np.array([4.0, 4.0]),
                            "alpha2_schedule": np.zeros((1, 2)),
                            "u_min": np.array([-1.0, -1.0]),
                            "u_max": np.array([1.0, 1.0]),
                            "x_min": np.array([-1e5]), "x_max": np.array([1e5]),
                            "x_s": np.array([-9e4])})
    tree = build_tree([], [np.zeros((1, 1))], [[1.0], [1.0]], N=1)
    forecast = DemandForecast(np.zeros((1, 1)), k=0)
    q = np.zeros(2)
    prob = build_dense(model, tree, forecast, np.zeros(1), q)
    z = solve_dense_full(prob, iters=20000)
    _x, u = prob.split(z)
    # unconstrained optimum of u'Wu u + 4*1'u with q=0 is u = -2 per entry,
    # clamped onto the box at -1
    np.testing.assert_allclose(u[0], [-1.0, -1.0], atol=1e-7)


def test_full_beats_apg_objective():
    # cross-solver bound: the reference must not be worse than the APG point
    from treesmpc.engine import SolverConfig, solve
    for seed in (0, 2, 7):
        model, tree, forecast, p, q = make_instance(seed)
        prob = build_dense(model, tree, forecast, p, q)
        z_ref = solve_dense_full(prob, iters=30000)
        rep = solve(model, tree, forecast, p, q, SolverConfig(max_iters=3000))
        u_cl = np.clip(rep.u_avg, model.u_min, model.u_max)
        z_apg = np.concatenate([rep.x_avg[1:].ravel(), u_cl.ravel()])
        assert dense_objective(prob, z_ref) <= dense_objective(prob, z_apg) + 1e-4
