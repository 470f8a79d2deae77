"""Self-contained LP (dense simplex) and MILP (branch-and-bound) solvers."""

from .bnb import enumerate_binaries, milp_solve
from .program import LinearProgram, MilpProgram, SolveOutcome
from .simplex import PRICING_RULES, lp_solve

__all__ = [
    "LinearProgram",
    "MilpProgram",
    "SolveOutcome",
    "enumerate_binaries",
    "lp_solve",
    "PRICING_RULES",
    "milp_solve",
]
