"""Privacy-aware iteration planning.

Plugging the closed-form noise level into the convergence bound gives an
error bound of the form ``A / sqrt(n K) + B * sqrt(K)``. Its minimiser is the
planned iteration count ``K*`` and its minimum is the utility bound.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

from .mechanism import PrivacyBudget, PrivacyError

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class ProblemConstants:
    L: float
    b2: float
    F0: float
    x0_sq: float
    G: float
    d: int
    c1: float = 1.0
    c2: float = 1.0

    def __post_init__(self):
        for name in ("b2", "F0", "x0_sq", "c1", "c2"):
            if getattr(self, name) < 0:
                raise PrivacyError(f"{name} must be non-negative")
        for name in ("L", "G", "d"):
            if not getattr(self, name) > 0:
                raise PrivacyError(f"{name} must be positive")

    @property
    def A(self) -> float:
        """Optimisation-error numerator ``13 F0 + 6 L |x0|^2 + 18 L b^2``."""
        return 13.0 * self.F0 + 6.0 * self.L * self.x0_sq + 18.0 * self.L * self.b2

    def as_dict(self) -> dict:
        return asdict(self)


def budget_sum(budgets: Sequence[PrivacyBudget]) -> float:
    """``sum_i ln(1/delta_i) / epsilon_i^2``."""
    return sum(b.log_inv_delta / b.epsilon**2 for b in budgets)


def _check_budgets(budgets, n):
    if len(budgets) != n:
        raise PrivacyError(f"expected {n} budgets, got {len(budgets)}")


def optimal_iterations_exact(c: ProblemConstants, budgets: Sequence[PrivacyBudget], n: int, J: int) -> float:
    _check_budgets(budgets, n)
    denom = 216.0 * c.L * c.d * c.c2**2 * c.G**2 * budget_sum(budgets)
    if denom == 0.0:
        raise PrivacyError("zero denominator: noise term vanishes, no finite optimum")
    return c.A * J**2 * n / denom


def optimal_iterations(c: ProblemConstants, budgets: Sequence[PrivacyBudget], n: int, J: int) -> int:
    """``K*`` rounded to the nearest integer, at least 1."""
    return max(1, int(round(optimal_iterations_exact(c, budgets, n, J))))


def noise_coefficient(c: ProblemConstants, budgets: Sequence[PrivacyBudget], n: int, J: int) -> float:
    """Coefficient of ``sqrt(K)`` in the error bound."""
    _check_budgets(budgets, n)
    return 216.0 * c.L * c.d * c.c2**2 * c.G**2 / (J**2 * math.sqrt(n)) * budget_sum(budgets) / n


def error_bound_vs_K(K: float, c: ProblemConstants, budgets: Sequence[PrivacyBudget], n: int, J: int) -> float:
    if K <= 0:
        raise PrivacyError("K must be positive")
    return c.A / math.sqrt(n * K) + math.sqrt(K) * noise_coefficient(c, budgets, n, J)


def convergence_bound(K: float, c: ProblemConstants, sigmas: Sequence[float], n: int) -> float:
    """Average squared gradient bound for step ``sqrt(n/K)`` and per-node noise levels."""
    noise = 24.0 * c.L * c.d / n * sum(s * s for s in sigmas)
    return (c.A + noise) / math.sqrt(n * K)


def utility_bound(c: ProblemConstants, budgets: Sequence[PrivacyBudget], n: int, J: int) -> float:
    _check_budgets(budgets, n)
    return 12.0 * c.c2 * c.G * math.sqrt(6.0 * c.L * c.d * c.A * budget_sum(budgets)) / (n * J)


def golden_section_argmin(f: Callable[[float], float], lo: float, hi: float,
                          tol: float = 1e-6, max_iter: int = 500) -> float:
    """Minimiser of a unimodal ``f`` on ``[lo, hi]``."""
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol * max(1.0, abs(c)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (a + b) / 2.0
