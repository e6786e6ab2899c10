import csv
import json

import numpy as np
import pytest

from treesmpc import (DimensionError, SolverConfig, ValidationError,
                      compute_kpis, emit_outputs, load_network, load_tree,
                      run_closed_loop, simulate_step)
from treesmpc.closed_loop import SimulationConfig, load_demand_file

from conftest import make_model


@pytest.fixture(scope="module")
def three_tank(data_dir):
    return load_network(data_dir / "networks" / "three_tank.json")


@pytest.fixture(scope="module")
def tree6(data_dir):
    return load_tree(data_dir / "trees" / "tree_6.json")


def _demand_profile(length, n_d=2, base=(30.0, 20.0)):
    k = np.arange(length)
    out = np.empty((length, n_d))
    out[:, 0] = base[0] + 10.0 * np.sin(2 * np.pi * (k - 7) / 24.0)
    out[:, 1] = base[1] + 8.0 * np.sin(2 * np.pi * (k - 9) / 24.0)
    return out


def test_single_step_reduces_to_one_solve(three_tank, tree6):
    profile = _demand_profile(1 + tree6.N)
    cfg = SimulationConfig(network=three_tank, tree=tree6,
                           demands=profile, forecast=profile, h_s=1,
                           solver=SolverConfig(max_iters=150),
                           x0=np.array([250.0, 200.0, 200.0]),
                           u_prev=np.array([20.0, 50.0, 15.0, 15.0]))
    res = run_closed_loop(cfg)
    assert res.controls.shape == (1, 4)
    expect = simulate_step(three_tank, res.states[0], res.controls[0],
                           res.demands[0])
    np.testing.assert_array_equal(res.states[1], expect)


def test_zero_demand_start_above_safety(three_tank, tree6):
    # no demand, positive prices, start above the safety level: the
    # controller keeps flows near zero and never dips below safety
    zeros = np.zeros((12 + tree6.N, 2))
    cfg = SimulationConfig(network=three_tank, tree=tree6, demands=zeros,
                           forecast=zeros, h_s=12,
                           solver=SolverConfig(max_iters=250),
                           x0=np.array([250.0, 200.0, 200.0]),
                           u_prev=np.zeros(4))
    res = run_closed_loop(cfg)
    assert res.kpis.safety_shortfall == 0.0
    assert np.max(np.abs(res.controls)) <= 0.5
    assert np.all(res.states[1:] >= three_tank.x_s[None, :] - 1e-9)


def test_plant_state_consistency(three_tank, tree6):
    profile = _demand_profile(8 + tree6.N)
    realized = profile + 0.5
    cfg = SimulationConfig(network=three_tank, tree=tree6, demands=realized,
                           forecast=profile, h_s=8,
                           solver=SolverConfig(max_iters=120),
                           x0=np.array([250.0, 200.0, 200.0]),
                           u_prev=np.array([20.0, 50.0, 15.0, 15.0]))
    res = run_closed_loop(cfg)
    for k in range(res.h_s):
        expect = simulate_step(three_tank, res.states[k], res.controls[k],
                               res.demands[k])
        np.testing.assert_array_equal(res.states[k + 1], expect)
    # forecaster sees the nominal profile, plant the realized one
    np.testing.assert_array_equal(res.demands, realized[:8])


def test_persistence_forecaster_runs(three_tank, tree6):
    realized = _demand_profile(6 + tree6.N)
    cfg = SimulationConfig(network=three_tank, tree=tree6, demands=realized,
                           forecast=None, h_s=6,
                           solver=SolverConfig(max_iters=80),
                           x0=np.array([250.0, 200.0, 200.0]),
                           u_prev=np.array([20.0, 50.0, 15.0, 15.0]))
    res = run_closed_loop(cfg)
    assert np.all(np.isfinite(res.residuals))


def test_demand_coverage_shortfall_rejected(three_tank, tree6):
    with pytest.raises(ValidationError, match="cover"):
        run_closed_loop(SimulationConfig(network=three_tank, tree=tree6,
                                         demands=np.zeros((3, 2)), h_s=10))


def test_kpi_hand_case(rng):
    model = make_model(rng, n_u=2, n_x=2)
    from treesmpc.model import NetworkModel
    model = NetworkModel(**{**model.__dict__,
                            "alpha1": np.array([1.0, 1.0]),
                            "alpha2_schedule": np.zeros((1, 2)),
                            "W_alpha": 1.0})
    states = np.tile(model.x_s + 1.0, (2, 1))
    controls = np.array([[1.0, 2.0], [1.0, 2.0]])
    kpi = compute_kpis(states, controls, model, h_s=2,
                       u_prev=np.array([1.0, 2.0]))
    assert kpi.economic == pytest.approx(3.0)
    assert kpi.smoothness == 0.0
    assert kpi.safety_shortfall == 0.0
    assert kpi.network_utility > 0.0


def test_kpi_shortfall_accumulates(rng):
    model = make_model(rng, n_x=2, n_u=2)
    states = np.tile(model.x_s - np.array([0.5, 0.0]), (3, 1))
    controls = np.zeros((3, 2))
    kpi = compute_kpis(states, controls, model, h_s=3, u_prev=np.zeros(2))
    assert kpi.safety_shortfall == pytest.approx(1.5)


def test_kpi_errors(rng):
    model = make_model(rng)
    with pytest.raises(DimensionError):
        compute_kpis(np.zeros((2, model.n_x)), np.zeros((3, model.n_u)), model, h_s=3)
    with pytest.raises(ValidationError, match="volume"):
        compute_kpis(np.zeros((2, model.n_x)), np.zeros((2, model.n_u)), model, h_s=2)


def test_kpi_determinism(three_tank, tree6):
    profile = _demand_profile(4 + tree6.N)
    cfg = dict(network=three_tank, tree=tree6, demands=profile,
               forecast=profile, h_s=4, solver=SolverConfig(max_iters=60),
               x0=np.array([250.0, 200.0, 200.0]),
               u_prev=np.array([20.0, 50.0, 15.0, 15.0]))
    a = run_closed_loop(SimulationConfig(**cfg))
    b = run_closed_loop(SimulationConfig(**cfg))
    assert a.kpis == b.kpis
    assert np.array_equal(a.controls, b.controls)


def test_emit_outputs_round_trip(tmp_path, three_tank, tree6):
    profile = _demand_profile(3 + tree6.N)
    cfg = SimulationConfig(network=three_tank, tree=tree6, demands=profile,
                           forecast=profile, h_s=3,
                           solver=SolverConfig(max_iters=60),
                           x0=np.array([250.0, 200.0, 200.0]),
                           u_prev=np.array([20.0, 50.0, 15.0, 15.0]))
    res = run_closed_loop(cfg)
    paths = emit_outputs(res, tmp_path, config=cfg)
    with open(paths["trajectory"]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    for k, row in enumerate(rows):
        for i in range(3):
            assert float(row[f"x{i}"]) == res.states[k, i]
        for i in range(4):
            assert float(row[f"u{i}"]) == res.controls[k, i]
        assert float(row["residual"]) == res.residuals[k]
    with open(paths["kpi"]) as fh:
        kpi = json.load(fh)
    assert kpi == res.kpis.to_dict()
    with open(paths["meta"]) as fh:
        meta = json.load(fh)
    assert meta["h_s"] == 3
    np.testing.assert_allclose(meta["final_state"], res.states[-1])


def test_emit_outputs_empty(tmp_path, three_tank):
    from treesmpc.closed_loop import KpiReport, SimulationResult
    res = SimulationResult(states=np.zeros((1, 3)), controls=np.zeros((0, 4)),
                           demands=np.zeros((0, 2)), economic=np.zeros(0),
                           smoothing=np.zeros(0), safety=np.zeros(0),
                           residuals=np.zeros(0), gaps=np.zeros(0),
                           kpis=KpiReport(0.0, 0.0, 0.0, 0.0), wall_times={})
    paths = emit_outputs(res, tmp_path)
    with open(paths["trajectory"]) as fh:
        lines = fh.read().strip().splitlines()
    assert len(lines) == 1  # header only


def test_demand_file_parsing(tmp_path):
    path = tmp_path / "d.json"
    path.write_text(json.dumps({"k0": 3, "demands": [[1.0, 2.0], [3.0, 4.0]]}))
    k0, arr = load_demand_file(path)
    assert k0 == 3
    np.testing.assert_array_equal(arr, [[1.0, 2.0], [3.0, 4.0]])
    from treesmpc import ParseError
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    with pytest.raises(ParseError):
        load_demand_file(bad)
