"""Moments accountant for the subsampled Gaussian mechanism.

For a query with sensitivity 1, noise multiplier ``sigma`` and sampling
probability ``q``, the per-step log-moment of integer order ``lam`` is

    alpha(lam) = log max(E1, E2)
    E1 = E_{z ~ mu0} [(mu0(z) / mu(z)) ** lam]
    E2 = E_{z ~ mu}  [(mu(z)  / mu0(z)) ** lam]

with ``mu0 = N(0, sigma^2)`` and ``mu = (1 - q) mu0 + q N(1, sigma^2)``.
``E2`` has a finite binomial expansion; ``E1`` is integrated numerically.
Log-moments add under composition and are turned into an (epsilon, delta)
statement by minimising over ``lam``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.special import gammaln, logsumexp

from .mechanism import NoiseScale, PrivacyBudget, PrivacyError

LAMBDA_MAX = 32
CONVERSIONS = ("tight", "classic")


class AccountantError(PrivacyError):
    pass


def _log_comb(a: int, k: np.ndarray) -> np.ndarray:
    return gammaln(a + 1) - gammaln(k + 1) - gammaln(a - k + 1)


def _log_expm1(x: np.ndarray) -> np.ndarray:
    # log(exp(x) - 1) for x > 0 without overflow
    return x + np.log(-np.expm1(-x))


def log_e2(lam: int, sigma: float, q: float) -> float:
    """Exact ``log E2`` from the binomial expansion of ``(1 - q + q e^{...})**(lam+1)``.

    Computed as ``log1p(sum_{k>=2} ...)`` so tiny moments keep full precision.
    """
    a = lam + 1
    k = np.arange(2, a + 1, dtype=float)
    if q == 1.0:
        k = np.array([float(a)])
        log_w = np.zeros(1)
    else:
        log_w = _log_comb(a, k) + (a - k) * math.log1p(-q) + k * math.log(q)
    expo = (k * k - k) / (2.0 * sigma * sigma)
    s = logsumexp(log_w + _log_expm1(expo))
    return float(np.logaddexp(0.0, s))


def _integrate_log(logf, scale: float) -> float:
    """``log int exp(logf(z)) dz`` over the real line with the peak factored out."""
    grid = np.linspace(-40.0, 40.0, 8001) * scale
    vals = logf(grid)
    top = int(np.argmax(vals))
    mode = float(grid[top])
    peak = float(vals[top])

    def f(z):
        return math.exp(float(logf(np.array([z]))[0]) - peak)

    total = 0.0
    err = 0.0
    for lo, hi in ((-np.inf, mode), (mode, np.inf)):
        v, e = integrate.quad(f, lo, hi, limit=400, epsabs=0.0, epsrel=1e-11)
        total += v
        err += e
    if not total > 0 or err > 1e-8 * total:
        raise AccountantError(f"quadrature did not converge (value {total:.3e}, error {err:.3e})")
    return peak + math.log(total)


def log_e1(lam: int, sigma: float, q: float) -> float:
    """``log E1`` by adaptive quadrature."""
    two_s2 = 2.0 * sigma * sigma
    log_norm = -0.5 * math.log(math.pi * two_s2)
    log_1mq = math.log1p(-q) if q < 1.0 else -np.inf
    log_q = math.log(q)

    def logf(z):
        ratio = np.logaddexp(log_1mq, log_q + (2.0 * z - 1.0) / two_s2)
        return log_norm - z * z / two_s2 - lam * ratio

    return _integrate_log(logf, sigma + 1.0)


def log_e2_quadrature(lam: int, sigma: float, q: float) -> float:
    """``log E2`` by quadrature; an independent check of :func:`log_e2`."""
    two_s2 = 2.0 * sigma * sigma
    log_norm = -0.5 * math.log(math.pi * two_s2)
    log_1mq = math.log1p(-q) if q < 1.0 else -np.inf
    log_q = math.log(q)

    def logf(z):
        ratio = np.logaddexp(log_1mq, log_q + (2.0 * z - 1.0) / two_s2)
        return log_norm - z * z / two_s2 + (lam + 1) * ratio

    return _integrate_log(logf, sigma + lam + 1.0)


@lru_cache(maxsize=4096)
def log_moments(sigma: float, q: float, lambda_max: int = LAMBDA_MAX,
                reverse: bool = True) -> tuple[float, ...]:
    """Per-step ``alpha(lam)`` for ``lam = 1..lambda_max``.

    ``reverse=False`` skips the numerically integrated ``E1`` term.
    """
    if not sigma > 0:
        raise AccountantError("noise multiplier must be > 0")
    if not 0 < q <= 1:
        raise AccountantError("sampling probability must lie in (0, 1]")
    out = []
    for lam in range(1, lambda_max + 1):
        a = log_e2(lam, sigma, q)
        if reverse:
            a = max(a, log_e1(lam, sigma, q))
        out.append(max(a, 0.0))
    return tuple(out)


def epsilon_from_moments(total: np.ndarray, delta: float, conversion: str = "tight") -> float:
    """Smallest epsilon over orders for accumulated log-moments ``total[lam-1]``.

    ``classic`` is the tail bound ``(alpha + ln(1/delta)) / lam``. ``tight``
    additionally applies the sharper Renyi-to-approximate-DP conversion at
    order ``lam + 1``, which is never larger than ``classic``.
    """
    if conversion not in CONVERSIONS:
        raise AccountantError(f"unknown conversion {conversion!r}")
    lam = np.arange(1, len(total) + 1, dtype=float)
    eps = (np.asarray(total) + math.log(1.0 / delta)) / lam
    if conversion == "tight":
        eps = eps + np.log(lam / (lam + 1.0)) - np.log(lam + 1.0) / lam
    return float(max(eps.min(), 0.0))


def accountant_epsilon(sigma_rel: float, q_sample: float, K: int, delta: float,
                       lambda_max: int = LAMBDA_MAX, conversion: str = "tight",
                       reverse: bool = True) -> float:
    """Epsilon spent after ``K`` compositions of the subsampled Gaussian mechanism."""
    if K < 1:
        raise AccountantError("K must be >= 1")
    if not 0 < delta < 1:
        raise AccountantError("delta must lie in (0, 1)")
    alpha = np.array(log_moments(float(sigma_rel), float(q_sample), lambda_max, reverse))
    return epsilon_from_moments(K * alpha, delta, conversion)


@dataclass
class AccountantState:
    """Running log-moment totals; one instance per node."""

    lambda_max: int = LAMBDA_MAX
    conversion: str = "tight"
    moments: np.ndarray = field(default=None)
    count: int = 0

    def __post_init__(self):
        if self.moments is None:
            self.moments = np.zeros(self.lambda_max)

    def compose(self, sigma_rel: float, q: float, steps: int = 1) -> None:
        alpha = np.array(log_moments(float(sigma_rel), float(q), self.lambda_max))
        self.moments = self.moments + steps * alpha
        self.count += steps

    def epsilon(self, delta: float) -> float:
        if self.count == 0:
            return 0.0
        return epsilon_from_moments(self.moments, delta, self.conversion)


def default_sensitivity(G: float) -> float:
    """L2 sensitivity of one corrected gradient when every stored gradient has norm <= G."""
    return 2.0 * 3.0 * G


def calibrate_sigma_accountant(K: int, J: int, budget: PrivacyBudget, G: float,
                               sensitivity: float | None = None, lambda_max: int = LAMBDA_MAX,
                               conversion: str = "tight", rel_tol: float = 1e-3,
                               node: int = 0) -> NoiseScale:
    """Smallest noise (to ``rel_tol`` in epsilon) meeting ``budget`` after ``K`` steps.

    Bisects the noise multiplier until the accountant's epsilon lands in
    ``[epsilon * (1 - rel_tol), epsilon]``; the returned sigma is the
    multiplier times ``sensitivity``.
    """
    if math.isinf(G) or not G > 0:
        raise PrivacyError("accountant calibration needs a finite gradient bound G > 0")
    sens = default_sensitivity(G) if sensitivity is None else float(sensitivity)
    q = 1.0 / J
    target = budget.epsilon

    def eps(s: float) -> float:
        return accountant_epsilon(s, q, K, budget.delta, lambda_max, conversion)

    hi = 1.0
    while eps(hi) > target:
        hi *= 2.0
        if hi > 1e8:
            raise AccountantError("could not bracket the noise multiplier from above")
    lo = hi / 2.0
    while eps(lo) <= target:
        hi = lo
        lo /= 2.0
        if lo < 1e-6:
            raise AccountantError("could not bracket the noise multiplier from below")
    for _ in range(200):
        if eps(hi) >= target * (1.0 - rel_tol):
            break
        mid = math.sqrt(lo * hi)
        if eps(mid) > target:
            lo = mid
        else:
            hi = mid
    else:
        raise AccountantError("bisection did not reach the tolerance")
    return NoiseScale(sigma=hi * sens, node=node)
