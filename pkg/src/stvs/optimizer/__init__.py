"""Critical-moment tuning as a quadratically constrained program."""

from .assemble import (
    PER_FAULT,
    SHARED,
    OptimizationConfig,
    OptimizationResult,
    assemble_nlp,
    extract_tunings,
    initial_point,
    optimize,
    solution_moment_voltages,
    start_points,
    variable_count,
)
from .oracle import OracleResult, evaluate_point, grid_search_oracle
from .ipm import NlpSolution, Status, Tolerances, solve_interior_point
from .qcqp import Expr, NlpProblem, ProblemBuilder, QuadraticMap

__all__ = [
    "PER_FAULT", "SHARED", "OptimizationConfig", "OptimizationResult", "assemble_nlp", "extract_tunings",
    "initial_point", "optimize", "solution_moment_voltages", "start_points", "variable_count",
    "NlpSolution", "Status", "Tolerances", "solve_interior_point",
    "Expr", "NlpProblem", "ProblemBuilder", "QuadraticMap",
    "OracleResult", "evaluate_point", "grid_search_oracle",
]
