"""Differentially private decentralized training over directed time-varying graphs.

Push-sum gossip on column-stochastic schedules, SAGA-style variance reduction,
Gaussian-mechanism privacy with a moments accountant, and an iteration-count
planner that balances optimisation error against injected noise.
"""

from .engine import (
    DivergenceError,
    MetricsRecord,
    RunConfig,
    RunResult,
    Simulation,
    run,
    run_privsgp,
    run_privsgp_vr,
)
from .privacy import (
    PrivacyBudget,
    ProblemConstants,
    accountant_epsilon,
    calibrate_sigma_accountant,
    calibrate_sigma_closed_form,
    optimal_iterations,
    utility_bound,
)
from .problems import LogisticProblem, MLPProblem, QuadraticProblem, build_problem, estimate_constants
from .topology import GraphSchedule, consensus_constants, mixing_matrix

__version__ = "0.1.0"

__all__ = [
    "DivergenceError", "MetricsRecord", "RunConfig", "RunResult", "Simulation", "run", "run_privsgp",
    "run_privsgp_vr", "PrivacyBudget", "ProblemConstants", "accountant_epsilon", "calibrate_sigma_accountant",
    "calibrate_sigma_closed_form", "optimal_iterations", "utility_bound", "LogisticProblem", "MLPProblem",
    "QuadraticProblem", "build_problem", "estimate_constants", "GraphSchedule", "consensus_constants",
    "mixing_matrix",
]
