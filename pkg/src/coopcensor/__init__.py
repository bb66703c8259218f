"""Cooperative censoring policies for energy-limited multihop sensor networks."""

from .asymptotic import AsymptoticSolution, main, stationary_lifetimes
from .errors import (
    BudgetExceededError,
    CensoringError,
    ConvergenceError,
    DegenerateScenarioError,
    ScenarioError,
    SliceError,
)
from .exact import ExactSolution, bellman_residual, solve_exact
from .model import (
    CostModel,
    ImportanceModel,
    RoutingTree,
    Scenario,
    build_line_scenario,
    build_pair_scenario,
    build_random_tree_scenario,
    build_single_node_scenario,
)
from .simulator import (
    FixedThreshold,
    GlobalCooperative,
    LocalThreshold,
    NonSelective,
    run_replications,
    simulate,
)

__version__ = "0.1.0"
