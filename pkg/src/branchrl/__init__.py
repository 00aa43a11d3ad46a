"""Branch-and-bound MILP solving with classical and learned branching rules."""

from .engine import BranchAndBound, BranchingEnv, Limits, SolveReport, dual_integral_score, solve
from .instances import MilpInstance, generate_knapsack_like, generate_set_cover, read_instance, write_instance
from .policies import make_policy
from .simplex import LpStatus, SimplexOptions, solve_lp, solve_relaxation

__version__ = "0.1.0"

__all__ = [
    "BranchAndBound",
    "BranchingEnv",
    "Limits",
    "SolveReport",
    "dual_integral_score",
    "solve",
    "MilpInstance",
    "generate_knapsack_like",
    "generate_set_cover",
    "read_instance",
    "write_instance",
    "make_policy",
    "LpStatus",
    "SimplexOptions",
    "solve_lp",
    "solve_relaxation",
]
