import numpy as np
import pytest

from treesmpc import (build_stage_cache, compute_basis, node_demands)
from treesmpc.factor import SolveContext, factor_step, solve_step
from treesmpc.model import NetworkModel
from treesmpc.oracle import build_dense, solve_dense_kkt
from treesmpc.points import DualPoint

from conftest import make_instance, make_model


def _setup(seed, **kw):
    model, tree, forecast, p, q = make_instance(seed, **kw)
    basis = compute_basis(model)
    factor = factor_step(basis, model)
    demands = node_demands(tree, forecast)
    cache = build_stage_cache(basis, model, tree, demands, k=forecast.k, q=q)
    return model, tree, forecast, p, q, basis, factor, cache, demands


def _random_dual(rng, tree, n_x, n_u, scale=1.0):
    n_e = tree.n_edges
    return DualPoint(scale * rng.standard_normal((n_e, n_x)),
                     scale * rng.standard_normal((n_e, n_x)),
                     scale * rng.standard_normal((n_e, n_u)))


def _stack(tree, z):
    return np.concatenate([z.x[1:].ravel(), z.u.ravel()])


def test_factor_identity_weight(rng):
    m = make_model(rng, n_u=5, n_e=2)
    m = NetworkModel(**{**m.__dict__, "Wu": np.eye(5)})
    basis = compute_basis(m)
    fac = factor_step(basis, m)
    # Rbar = I: Lam = -I, Phi = -Bbar', Psi = -L'
    np.testing.assert_allclose(fac.Phi, -fac.Bbar.T, atol=1e-12)
    np.testing.assert_allclose(fac.Psi, -basis.L.T, atol=1e-12)
    X = rng.standard_normal((4, basis.n_v))
    np.testing.assert_allclose(fac.apply_lambda(X), -X, atol=1e-12)


def test_factor_inverse_consistency(rng):
    for seed in range(10):
        model, tree, forecast, p, q, basis, factor, cache, _ = _setup(seed)
        X = rng.standard_normal((7, basis.n_v))
        # Rbar @ (-Lam x) = x
        Y = -factor.apply_lambda(X)
        np.testing.assert_allclose(Y @ basis.Rbar, X, atol=1e-9)


def test_factor_bbar_columns(rng):
    model = make_model(rng)
    basis = compute_basis(model)
    fac = factor_step(basis, model)
    for i in range(basis.n_v):
        np.testing.assert_allclose(fac.Bbar[:, i], model.B @ basis.L[:, i], atol=1e-13)


def test_solve_step_zero_dual_zero_beta_stays_at_previous():
    # single scenario, one step, zero prices, constant demand, q = uhat:
    # the minimizer keeps v at the seed offset, i.e. u = uhat
    rng = np.random.default_rng(42)
    model = make_model(rng, n_x=2, n_u=3, n_e=1)
    model = NetworkModel(**{**model.__dict__,
                            "alpha1": np.zeros(3),
                            "alpha2_schedule": np.zeros((1, 3))})
    from treesmpc import DemandForecast, build_tree
    tree = build_tree([], [np.zeros((1, 2))], [[1.0], [1.0]], N=1)
    forecast = DemandForecast(np.array([[0.4, 0.2]]), k=0)
    basis = compute_basis(model)
    demands = node_demands(tree, forecast)
    q = basis.part_map @ demands[0]  # q equals uhat of the single edge
    cache = build_stage_cache(basis, model, tree, demands, k=0, q=q)
    np.testing.assert_allclose(cache.beta, 0.0, atol=1e-12)
    factor = factor_step(basis, model)
    w = DualPoint.zeros(tree.n_edges, model.n_x, model.n_u)
    z = solve_step(factor, cache, tree, w, p=np.array([1.0, 1.0]))
    np.testing.assert_allclose(z.u[0], q, atol=1e-12)


def test_solve_step_matches_dense_kkt():
    # acceptance-style sweep over the small instance family
    rng = np.random.default_rng(7)
    for seed in range(20):
        model, tree, forecast, p, q, basis, factor, cache, _ = _setup(seed)
        w = _random_dual(rng, tree, model.n_x, model.n_u)
        z = solve_step(factor, cache, tree, w, p)
        prob = build_dense(model, tree, forecast, p, q)
        ref = solve_dense_kkt(prob, w)
        got = _stack(tree, z)
        rel = np.max(np.abs(got - ref)) / max(1.0, np.max(np.abs(ref)))
        assert rel <= 1e-8, f"seed {seed}: relative error {rel:.2e}"


def test_solve_step_affine_in_dual(rng):
    model, tree, forecast, p, q, basis, factor, cache, _ = _setup(3)
    w0 = DualPoint.zeros(tree.n_edges, model.n_x, model.n_u)
    z0 = _stack(tree, solve_step(factor, cache, tree, w0, p))
    for _ in range(5):
        w1 = _random_dual(rng, tree, model.n_x, model.n_u)
        w2 = _random_dual(rng, tree, model.n_x, model.n_u)
        w12 = DualPoint(w1.sig + w2.sig, w1.zeta + w2.zeta, w1.psi + w2.psi)
        z1 = _stack(tree, solve_step(factor, cache, tree, w1, p))
        z2 = _stack(tree, solve_step(factor, cache, tree, w2, p))
        z12 = _stack(tree, solve_step(factor, cache, tree, w12, p))
        np.testing.assert_allclose(z12 - z0, (z1 - z0) + (z2 - z0),
                                   rtol=0, atol=1e-9 * max(1, np.abs(z12).max()))


def test_solve_step_dynamics_and_junction_feasible(rng):
    for seed in (0, 4, 8):
        model, tree, forecast, p, q, basis, factor, cache, demands = _setup(seed)
        w = _random_dual(rng, tree, model.n_x, model.n_u, scale=2.0)
        z = solve_step(factor, cache, tree, w, p)
        for e in range(tree.n_edges):
            node = e + 1
            parent = int(tree.anc[node])
            x_next = model.A @ z.x[parent] + model.B @ z.u[e] + model.Gd @ demands[e]
            np.testing.assert_allclose(z.x[node], x_next, atol=1e-9)
            resid = model.E @ z.u[e] + model.Ed @ demands[e]
            np.testing.assert_allclose(resid, 0.0, atol=1e-9)


def test_dual_gradient_first_order_condition(rng):
    # z minimizes <z, H'w> + f(z): the gradient of the smooth reduced cost
    # plus H'w must vanish along the feasible subspace (checked in v-space)
    model, tree, forecast, p, q, basis, factor, cache, demands = _setup(5)
    w = _random_dual(rng, tree, model.n_x, model.n_u)
    z = solve_step(factor, cache, tree, w, p)
    v = (z.u - cache.uhat) @ basis.L
    h = 1e-6
    n_e, n_v = tree.n_edges, basis.n_v

    def total(v_flat):
        vv = v_flat.reshape(n_e, n_v)
        uu = vv @ basis.L.T + cache.uhat
        xx = np.empty((tree.n_nodes, model.n_x))
        xx[0] = p
        val = 0.0
        pa = tree.parent_edge()
        stages = tree.edge_stage()
        for e in range(n_e):
            node = e + 1
            xx[node] = model.A @ xx[int(tree.anc[node])] + model.B @ uu[e] + model.Gd @ demands[e]
            u_prev = q if pa[e] < 0 else uu[pa[e]]
            du = uu[e] - u_prev
            val += tree.edge_prob[e] * (
                model.W_alpha * model.price(cache.k + stages[e]) @ uu[e]
                + du @ model.Wu @ du)
            val += (w.sig[e] + w.zeta[e]) @ xx[node] + w.psi[e] @ uu[e]
        return val

    v_flat = v.ravel()
    grad = np.empty(v_flat.shape[0])
    for i in range(v_flat.shape[0]):
        step = np.zeros_like(v_flat)
        step[i] = h
        grad[i] = (total(v_flat + step) - total(v_flat - step)) / (2 * h)
    assert np.max(np.abs(grad)) <= 1e-6


def test_thread_count_determinism(rng):
    model, tree, forecast, p, q, basis, factor, cache, _ = _setup(6, branching=[3, 2], N=4)
    w = _random_dual(rng, tree, model.n_x, model.n_u)
    z1 = solve_step(factor, cache, tree, w, p, threads=1)
    z2 = solve_step(factor, cache, tree, w, p, threads=2)
    z8 = solve_step(factor, cache, tree, w, p, threads=8)
    assert np.array_equal(z1.x, z2.x) and np.array_equal(z1.u, z2.u)
    assert np.array_equal(z1.x, z8.x) and np.array_equal(z1.u, z8.u)


def test_chunk_order_commutes(rng):
    # permuting node-chunk execution order leaves the result bitwise unchanged
    model, tree, forecast, p, q, basis, factor, cache, _ = _setup(9, branching=[4, 2], N=4)
    w = _random_dual(rng, tree, model.n_x, model.n_u)
    ref = solve_step(factor, cache, tree, w, p)
    with SolveContext(factor, tree, threads=1) as ctx:
        ctx.backward_plan = [(j, list(reversed(t))) for j, t in ctx.backward_plan]
        ctx.forward_plan = [(j, list(reversed(t))) for j, t in ctx.forward_plan]
        out = ctx.solve(cache, w, p)
        assert np.array_equal(ref.x, out.x)
        assert np.array_equal(ref.u, out.u)


def test_stale_cache_rejected():
    model, tree, forecast, p, q, basis, factor, cache, _ = _setup(1, branching=[2], N=2)
    model2, tree2, forecast2, p2, q2, *_ = make_instance(1, branching=[2, 2], N=3)
    w = DualPoint.zeros(tree2.n_edges, model.n_x, model.n_u)
    with pytest.raises(Exception):
        solve_step(factor, cache, tree2, w, p)
