"""Reconstruction of a training set from a differentially private forest."""

from .anytime import AnnealingConfig, solve_anytime
from .exact import ExactLimits, InfeasibleProblem, SearchSpaceTooLarge, search_space_size, solve_exact, valid_patterns
from .problem import (
    ExactN,
    NInterval,
    ReconstructionProblem,
    ThreatModelError,
    build_problem,
    estimate_n_interval,
)
from .solution import (
    CandidateSolution,
    ConstraintViolation,
    TracePoint,
    check_solution,
    extract_reconstruction,
    free_rows,
    make_solution,
)

__all__ = [
    "AnnealingConfig", "solve_anytime", "ExactLimits", "InfeasibleProblem", "SearchSpaceTooLarge",
    "search_space_size", "solve_exact", "valid_patterns", "ExactN", "NInterval", "ReconstructionProblem",
    "ThreatModelError", "build_problem", "estimate_n_interval", "CandidateSolution", "ConstraintViolation",
    "TracePoint", "check_solution", "extract_reconstruction", "free_rows", "make_solution",
]
