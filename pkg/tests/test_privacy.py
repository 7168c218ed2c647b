import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from privsgp.privacy import (
    AccountantState,
    NoiseScale,
    PreconditionWarning,
    PrivacyBudget,
    PrivacyError,
    ProblemConstants,
    accountant_epsilon,
    calibrate_sigma_accountant,
    calibrate_sigma_closed_form,
    clip,
    clip_rows,
    convergence_bound,
    error_bound_vs_K,
    golden_section_argmin,
    optimal_iterations,
    optimal_iterations_exact,
    precondition_holds,
    sample_noise,
    utility_bound,
)
from privsgp.privacy.accountant import (
    AccountantError,
    epsilon_from_moments,
    log_e1,
    log_e2,
    log_e2_quadrature,
    log_moments,
)
from privsgp.rng import stream

# ---------------------------------------------------------------- clipping


def test_clip_examples():
    np.testing.assert_array_equal(clip(np.array([3.0, 4.0]), 10.0), [3.0, 4.0])
    np.testing.assert_allclose(clip(np.array([3.0, 4.0]), 1.0), [0.6, 0.8], rtol=1e-15)
    np.testing.assert_array_equal(clip(np.zeros(3), 0.5), np.zeros(3))
    np.testing.assert_array_equal(clip(np.array([30.0, 40.0]), math.inf), [30.0, 40.0])
    with pytest.raises(PrivacyError):
        clip(np.ones(2), 0.0)


@given(st.integers(0, 2**31), st.floats(0.01, 10))
def test_clip_rows_matches_clip(seed, G):
    M = np.random.default_rng(seed).standard_normal((6, 4)) * 3
    out = clip_rows(M, G)
    for r, o in zip(M, out):
        np.testing.assert_allclose(o, clip(r, G), rtol=1e-14, atol=1e-15)
        assert np.linalg.norm(o) <= G * (1 + 1e-12)


# ---------------------------------------------------------------- noise


def test_zero_noise_is_exact_zero():
    np.testing.assert_array_equal(sample_noise(0.0, 5, stream(0, 0, "noise")), np.zeros(5))
    np.testing.assert_array_equal(sample_noise(NoiseScale(0.0), 3, stream(0, 0, "noise")), np.zeros(3))


def test_noise_variance_monte_carlo():
    draws = sample_noise(1.7, 1_000_000, stream(3, 0, "noise"))
    assert draws.var() == pytest.approx(1.7**2, rel=0.01)
    assert abs(draws.mean()) < 0.01


def test_noise_streams_uncorrelated_across_nodes():
    a = sample_noise(1.0, 100_000, stream(9, 0, "noise"))
    b = sample_noise(1.0, 100_000, stream(9, 1, "noise"))
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.01


def test_negative_sigma_rejected():
    with pytest.raises(PrivacyError):
        sample_noise(-1.0, 2, stream(0, 0, "noise"))
    with pytest.raises(PrivacyError):
        NoiseScale(-0.1)


def test_budget_validation():
    with pytest.raises(PrivacyError):
        PrivacyBudget(0.0, 1e-5)
    with pytest.raises(PrivacyError):
        PrivacyBudget(1.0, 1.0)


# ---------------------------------------------------------------- closed form


def test_closed_form_reference_value():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PreconditionWarning)
        s = calibrate_sigma_closed_form(100, 100, PrivacyBudget(1.0, 1e-5), 1.0)
    assert s.sigma == pytest.approx(3 * math.sqrt(100 * math.log(1e5)) / 100, rel=1e-15)
    assert s.sigma == pytest.approx(1.0179, abs=1e-4)


def test_closed_form_homogeneity():
    b = PrivacyBudget(0.5, 1e-5)
    base = calibrate_sigma_closed_form(4000, 20, b, 1.0, warn=False).sigma
    assert calibrate_sigma_closed_form(4000, 20, b, 2.0, warn=False).sigma == pytest.approx(2 * base, rel=1e-14)
    assert calibrate_sigma_closed_form(16000, 20, b, 1.0, warn=False).sigma == pytest.approx(2 * base, rel=1e-14)


def test_closed_form_precondition_reporting():
    b = PrivacyBudget(1.0, 1e-5)
    assert not precondition_holds(100, 100, b)
    with pytest.warns(PreconditionWarning, match="c1\\*K/J\\^2"):
        calibrate_sigma_closed_form(100, 100, b, 1.0)
    with pytest.raises(PrivacyError, match="epsilon=1.0"):
        calibrate_sigma_closed_form(100, 100, b, 1.0, strict=True)
    assert precondition_holds(200, 10, b)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        calibrate_sigma_closed_form(200, 10, b, 1.0, strict=True)
    with pytest.raises(PrivacyError):
        calibrate_sigma_closed_form(10, 10, b, math.inf)


# ---------------------------------------------------------------- accountant


def test_full_batch_moments_match_gaussian_renyi_divergence():
    # at q = 1 the log-moment is the Gaussian Renyi divergence lam (lam + 1) / (2 sigma^2)
    for sigma in (0.7, 2.0, 4.0):
        for lam in (1, 5, 32):
            assert log_e2(lam, sigma, 1.0) == pytest.approx(lam * (lam + 1) / (2 * sigma**2), rel=1e-12)


@pytest.mark.parametrize("sigma,q", [(0.8, 0.01), (2.0, 0.05), (4.0, 0.2), (1.0, 0.5)])
def test_exact_moment_matches_quadrature(sigma, q):
    for lam in (1, 4, 16, 32):
        exact = log_e2(lam, sigma, q)
        num = log_e2_quadrature(lam, sigma, q)
        assert exact == pytest.approx(num, rel=1e-9, abs=1e-14)
        assert log_e1(lam, sigma, q) <= exact + 1e-12


def test_moments_monte_carlo():
    sigma, q, lam = 1.5, 0.3, 3
    rng = np.random.default_rng(0)
    n = 2_000_000
    z = rng.standard_normal(n) * sigma + (rng.uniform(size=n) < q)
    ratio = (1 - q) + q * np.exp((2 * z - 1) / (2 * sigma**2))
    assert math.log(np.mean(ratio**lam)) == pytest.approx(log_e2(lam, sigma, q), rel=0.02)
    z0 = rng.standard_normal(n) * sigma
    ratio0 = (1 - q) + q * np.exp((2 * z0 - 1) / (2 * sigma**2))
    assert math.log(np.mean(ratio0 ** (-lam))) == pytest.approx(log_e1(lam, sigma, q), rel=0.02)


def test_accountant_below_analytic_gaussian_bound():
    analytic = math.sqrt(2 * math.log(1.25 / 1e-5)) / 4.0
    assert analytic == pytest.approx(1.2112, abs=1e-4)
    assert accountant_epsilon(4.0, 1.0, 1, 1e-5) <= 1.211
    assert accountant_epsilon(4.0, 1.0, 1, 1e-5, conversion="classic") > 1.211


@pytest.mark.parametrize("sigma,q", [(1.0, 0.01), (4.0, 1.0), (2.0, 0.1)])
def test_tight_conversion_never_exceeds_classic(sigma, q):
    for K in (1, 10, 1000):
        assert accountant_epsilon(sigma, q, K, 1e-5) <= accountant_epsilon(sigma, q, K, 1e-5, conversion="classic")


def test_accountant_within_basic_composition():
    for sigma, q in [(4.0, 1.0), (1.0, 0.05)]:
        single = accountant_epsilon(sigma, q, 1, 1e-6)
        for K in (2, 10, 100):
            assert accountant_epsilon(sigma, q, K, K * 1e-6) <= K * single + 1e-12


def test_accountant_monotone_in_steps_and_noise():
    Ks = [1, 10, 100]
    sigmas = [1.0, 2.0, 4.0]
    grid = np.array([[accountant_epsilon(s, 0.02, K, 1e-5) for K in Ks] for s in sigmas])
    assert np.all(np.diff(grid, axis=1) > 0)
    assert np.all(np.diff(grid, axis=0) < 0)


def test_accountant_state_composes_additively():
    st_ = AccountantState()
    st_.compose(2.0, 0.1, steps=30)
    st_.compose(2.0, 0.1, steps=20)
    assert st_.count == 50
    assert st_.epsilon(1e-5) == pytest.approx(accountant_epsilon(2.0, 0.1, 50, 1e-5), rel=1e-12)
    assert AccountantState().epsilon(1e-5) == 0.0
    assert all(a >= 0 for a in log_moments(2.0, 0.1))


def test_accountant_input_validation():
    with pytest.raises(AccountantError):
        accountant_epsilon(0.0, 0.1, 1, 1e-5)
    with pytest.raises(AccountantError):
        accountant_epsilon(1.0, 0.0, 1, 1e-5)
    with pytest.raises(AccountantError):
        accountant_epsilon(1.0, 0.1, 0, 1e-5)
    with pytest.raises(AccountantError):
        epsilon_from_moments(np.zeros(3), 1e-5, conversion="other")


def test_accountant_calibration_hits_target():
    b = PrivacyBudget(1.0, 1e-5)
    s = calibrate_sigma_accountant(500, 50, b, G=1.0)
    eps = accountant_epsilon(s.sigma / 6.0, 1 / 50, 500, 1e-5)
    assert b.epsilon * (1 - 1e-3) <= eps <= b.epsilon
    assert calibrate_sigma_accountant(1000, 50, b, G=1.0).sigma > s.sigma
    s2 = calibrate_sigma_accountant(500, 50, b, G=1.0, sensitivity=1.0)
    assert s2.sigma == pytest.approx(s.sigma / 6.0, rel=2e-3)


def test_accountant_calibration_grows_like_sqrt_steps():
    b = PrivacyBudget(1.0, 1e-5)
    Ks = np.array([1e3, 1e4, 1e5])
    sig = [calibrate_sigma_accountant(int(K), 100, b, G=1.0, sensitivity=1.0).sigma for K in Ks]
    slope = np.polyfit(np.log(Ks), np.log(sig), 1)[0]
    assert slope == pytest.approx(0.5, rel=0.1)


def test_accountant_calibration_needs_finite_bound():
    with pytest.raises(PrivacyError):
        calibrate_sigma_accountant(10, 10, PrivacyBudget(1.0, 1e-5), G=math.inf)


# ---------------------------------------------------------------- planner

LN1 = math.exp(-1.0)  # delta with ln(1/delta) = 1


def toy_constants(**kw):
    base = dict(L=1.0, b2=0.0, F0=1.0, x0_sq=0.0, G=1.0, d=1)
    base.update(kw)
    return ProblemConstants(**base)


def test_planner_reference_instance():
    c = toy_constants()
    budgets = [PrivacyBudget(1.0, LN1)] * 4
    assert optimal_iterations_exact(c, budgets, 4, 10) == pytest.approx(5200 / 864, rel=1e-12)
    assert optimal_iterations(c, budgets, 4, 10) == 6


def test_planner_quadruples_with_doubled_samples():
    c = toy_constants(F0=3.0, b2=0.5, x0_sq=2.0)
    budgets = [PrivacyBudget(2.0, 1e-5)] * 8
    assert optimal_iterations_exact(c, budgets, 8, 40) == pytest.approx(4 * optimal_iterations_exact(c, budgets, 8, 20),
                                                                        rel=1e-12)


def test_planner_accepts_large_reported_constants():
    c = ProblemConstants(L=25, b2=500000, F0=2.8, x0_sq=780000, G=10.0, d=11_000_000)
    k = optimal_iterations(c, [PrivacyBudget(3.0, 1e-5)] * 16, 16, 3125)
    assert k >= 1


def test_planner_rejects_bad_constants():
    with pytest.raises(PrivacyError):
        toy_constants(L=0.0)
    with pytest.raises(PrivacyError):
        toy_constants(F0=-1.0)
    with pytest.raises(PrivacyError):
        optimal_iterations(toy_constants(), [PrivacyBudget(1.0, 0.5)] * 3, 4, 10)


def random_constants(rng):
    return ProblemConstants(L=10 ** rng.uniform(-1, 1.5), b2=10 ** rng.uniform(-3, 1), F0=10 ** rng.uniform(-1, 1),
                            x0_sq=10 ** rng.uniform(-2, 2), G=10 ** rng.uniform(-1, 1), d=int(rng.integers(1, 200)),
                            c2=10 ** rng.uniform(-1, 0.5))


@settings(max_examples=40)
@given(st.integers(0, 2**31))
def test_closed_form_noise_reproduces_error_bound(seed):
    rng = np.random.default_rng(seed)
    c = random_constants(rng)
    n, J = int(rng.integers(1, 33)), int(rng.integers(1, 500))
    budgets = [PrivacyBudget(10 ** rng.uniform(-1, 1), 10 ** rng.uniform(-8, -2)) for _ in range(n)]
    K = int(rng.integers(1, 10**6))
    sig = [calibrate_sigma_closed_form(K, J, b, c.G, c2=c.c2, warn=False).sigma for b in budgets]
    assert convergence_bound(K, c, sig, n) == pytest.approx(error_bound_vs_K(K, c, budgets, n, J), rel=1e-9)


@settings(max_examples=40)
@given(st.integers(0, 2**31))
def test_utility_bound_is_bound_at_optimum(seed):
    rng = np.random.default_rng(seed)
    c = random_constants(rng)
    n, J = int(rng.integers(1, 33)), int(rng.integers(1, 500))
    budgets = [PrivacyBudget(10 ** rng.uniform(-1, 1), 10 ** rng.uniform(-8, -2)) for _ in range(n)]
    k = optimal_iterations_exact(c, budgets, n, J)
    u = utility_bound(c, budgets, n, J)
    assert u == pytest.approx(error_bound_vs_K(k, c, budgets, n, J), rel=1e-9)
    assert error_bound_vs_K(k * 1.01, c, budgets, n, J) >= u
    assert error_bound_vs_K(k * 0.99, c, budgets, n, J) >= u


def test_utility_bound_scalings():
    c = toy_constants(F0=2.0, b2=1.0)
    b = PrivacyBudget(1.5, 1e-5)
    u4 = utility_bound(c, [b] * 4, 4, 50)
    assert utility_bound(c, [b] * 16, 16, 50) == pytest.approx(u4 / 2, rel=1e-12)
    assert utility_bound(c, [PrivacyBudget(3.0, 1e-5)] * 4, 4, 50) == pytest.approx(u4 / 2, rel=1e-12)


def test_error_bound_shape():
    c = toy_constants()
    budgets = [PrivacyBudget(1.0, 1e-5)] * 4
    mid = error_bound_vs_K(optimal_iterations_exact(c, budgets, 4, 100), c, budgets, 4, 100)
    assert error_bound_vs_K(1e-8, c, budgets, 4, 100) > 1e3 * mid
    assert error_bound_vs_K(1e14, c, budgets, 4, 100) > 1e3 * mid
    weak = [PrivacyBudget(1.0, 1 - 1e-15)] * 4
    vals = [error_bound_vs_K(K, c, weak, 4, 100) for K in (1, 10, 100, 1000, 10**4)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    with pytest.raises(PrivacyError):
        error_bound_vs_K(0, c, budgets, 4, 100)


def test_golden_section_on_known_function():
    assert golden_section_argmin(lambda x: (x - 3.2) ** 2, 0, 10, tol=1e-10) == pytest.approx(3.2, abs=1e-8)
