"""Scenario-tree stochastic MPC for flow-based water networks."""

from .errors import DimensionError, ParseError, TreeSmpcError, ValidationError
from .model import (NetworkModel, StageCost, junction_residual, load_network,
                    simulate_step, stage_cost)
from .tree import (DemandForecast, ScenarioTree, build_tree, load_tree,
                   node_demands, scenario_paths)
from .elimination import (EliminationBasis, StageCache, build_stage_cache,
                          compute_basis, lift_controls, particular_solution)
from .factor import FactorCache, factor_step, solve_step
from .engine import (DualScaling, SolverConfig, SolveReport, apply_H,
                     adjoint_H, compute_lambda, compute_preconditioner,
                     extrapolate, prox_g, solve, theta_update)
from .points import DualPoint, PrimalPoint, SplitPoint
from .oracle import (DenseProblem, build_dense, dense_objective,
                     solve_dense_full, solve_dense_kkt)
from .closed_loop import (KpiReport, SimulationConfig, SimulationResult,
                          compute_kpis, emit_outputs, run_closed_loop)

__version__ = "0.1.0"
