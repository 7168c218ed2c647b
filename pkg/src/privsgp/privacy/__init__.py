from .accountant import (
    AccountantError,
    AccountantState,
    accountant_epsilon,
    calibrate_sigma_accountant,
    default_sensitivity,
    log_moments,
)
from .mechanism import (
    NoiseScale,
    PreconditionWarning,
    PrivacyBudget,
    PrivacyError,
    calibrate_sigma_closed_form,
    clip,
    clip_rows,
    precondition_holds,
    sample_noise,
)
from .planner import (
    ProblemConstants,
    convergence_bound,
    error_bound_vs_K,
    golden_section_argmin,
    optimal_iterations,
    optimal_iterations_exact,
    utility_bound,
)

__all__ = [
    "AccountantError", "AccountantState", "accountant_epsilon", "calibrate_sigma_accountant",
    "default_sensitivity", "log_moments", "NoiseScale", "PreconditionWarning", "PrivacyBudget",
    "PrivacyError", "calibrate_sigma_closed_form", "clip", "clip_rows", "precondition_holds", "sample_noise",
    "ProblemConstants", "convergence_bound", "error_bound_vs_K", "golden_section_argmin",
    "optimal_iterations", "optimal_iterations_exact", "utility_bound",
]
