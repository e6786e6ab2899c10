"""Regenerate the shipped data fixtures (deterministic; safe to re-run)."""

import json
import pathlib

import numpy as np

ROOT = pathlib.Path(__file__).resolve().parents[1]
DATA = ROOT / "data"


def three_tank_network():
    # Tanks: t1 (pump-fed), t2 and t3 (fed from a shared junction).
    # Inputs: u1 pump->t1, u2 pump->junction, u3 junction->t2, u4 junction->t3.
    # Junction balance: u2 - u3 - u4 - d1 = 0.  Demand d2 draws from t1.
    return {
        "A": np.eye(3).tolist(),
        "B": [[1.0, 0.0, 0.0, 0.0],
              [0.0, 0.0, 1.0, 0.0],
              [0.0, 0.0, 0.0, 1.0]],
        "Gd": [[0.0, -1.0],
               [0.0, 0.0],
               [0.0, 0.0]],
        "E": [[0.0, 1.0, -1.0, -1.0]],
        "Ed": [[-1.0, 0.0]],
        "u_min": [0.0, 0.0, 0.0, 0.0],
        "u_max": [40.0, 80.0, 60.0, 60.0],
        "x_min": [0.0, 0.0, 0.0],
        "x_max": [500.0, 400.0, 400.0],
        "x_s": [100.0, 80.0, 80.0],
        "alpha1": [2.0, 1.5, 0.2, 0.2],
        "alpha2_schedule": [
            [round(1.0 + 0.75 * np.sin(2 * np.pi * (k - 8) / 24.0), 6)
             * w for w in (1.0, 1.2, 0.0, 0.0)]
            for k in range(24)
        ],
        "W_alpha": 1.0,
        "Wu": np.diag([0.5, 0.3, 0.2, 0.2]).tolist(),
        "Wx": 5.0,
        "gamma_d": 20.0,
    }


def tree_doc(branching, N, seed, eps_scales=(6.0, 4.0)):
    """Uniform-probability tree with seeded demand-error draws."""
    rng = np.random.default_rng(seed)
    factors = list(branching) + [1] * (N - len(branching))
    stages = [{"nodes": [{"anc": None, "prob": 1.0}]}]
    prev_probs = [1.0]
    for j in range(1, N + 1):
        b = factors[j - 1]
        nodes = []
        probs = []
        for i, pp in enumerate(prev_probs):
            for _ in range(b):
                if b > 1:
                    eps = [round(float(rng.normal(0.0, s)), 6) for s in eps_scales]
                else:
                    # single-child stages inherit the branch error profile
                    eps = [round(float(rng.normal(0.0, s * 0.5)), 6) for s in eps_scales]
                nodes.append({"anc": i, "prob": pp / b, "eps": eps})
                probs.append(pp / b)
        stages.append({"nodes": nodes})
        prev_probs = probs
    return {"N": N, "stages": stages}


def demand_profiles(length, seed):
    rng = np.random.default_rng(seed)
    k = np.arange(length)
    d1 = 30.0 + 10.0 * np.sin(2 * np.pi * (k - 7) / 24.0)
    d2 = 20.0 + 8.0 * np.sin(2 * np.pi * (k - 9) / 24.0)
    nominal = np.stack([d1, d2], axis=1)
    realized = nominal + rng.normal(0.0, [2.0, 1.5], size=nominal.shape)
    realized = np.maximum(realized, 0.0)
    return nominal, realized


def main():
    (DATA / "networks").mkdir(parents=True, exist_ok=True)
    (DATA / "trees").mkdir(parents=True, exist_ok=True)
    (DATA / "demands").mkdir(parents=True, exist_ok=True)

    with open(DATA / "networks" / "three_tank.json", "w") as fh:
        json.dump(three_tank_network(), fh, indent=1)

    for name, branching, seed in [("tree_1", [], 7), ("tree_6", [3, 2], 11),
                                  ("tree_30", [6, 5], 13)]:
        with open(DATA / "trees" / f"{name}.json", "w") as fh:
            json.dump(tree_doc(branching, N=8, seed=seed), fh, indent=1)

    nominal, realized = demand_profiles(168 + 8, seed=99)
    with open(DATA / "demands" / "week_nominal.json", "w") as fh:
        json.dump({"k0": 0, "demands": [[round(v, 6) for v in row] for row in nominal]}, fh)
    with open(DATA / "demands" / "week_realized.json", "w") as fh:
        json.dump({"k0": 0, "demands": [[round(v, 6) for v in row] for row in realized]}, fh)

    with open(DATA / "x0_three_tank.json", "w") as fh:
        json.dump([250.0, 200.0, 200.0], fh)
    with open(DATA / "uprev_three_tank.json", "w") as fh:
        json.dump([20.0, 50.0, 15.0, 15.0], fh)
    print("fixtures written to", DATA)


if __name__ == "__main__":
    main()
