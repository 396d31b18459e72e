import numpy as np
import pytest
from conftest import brute_force_qr, lp_qr

from qremkit.errors import DegenerateDensity, InvalidParameter, RankDeficient
from qremkit.numkit import RngStream
from qremkit.qrem import (
    QremOptions,
    ald_logdensity,
    asymptotic_cov,
    basis_is_optimal,
    check_loss,
    fit_qrem,
    goodness_of_fit,
    line_search,
    robust_scale,
)
from qremkit.simlab import design_matrix, generate, get_scenario


def test_check_loss_values():
    assert check_loss(0.0, 0.3) == 0.0
    assert check_loss(-1.0, 0.2) == pytest.approx(0.8)
    assert check_loss(1.0, 0.2) == pytest.approx(0.2)
    for t in (0.5, 2.0, 7.0):
        assert check_loss(t, 0.5) == check_loss(-t, 0.5) == pytest.approx(0.5 * t)
    np.testing.assert_allclose(check_loss(np.array([-2.0, 3.0]), 0.25), [1.5, 0.75])


def test_ald_logdensity():
    assert ald_logdensity(0.0, 0.3, 2.0) == pytest.approx(np.log(0.21 / 2.0))
    u = np.linspace(-3, 3, 7)
    np.testing.assert_allclose(ald_logdensity(u, 0.5, 1.0), np.log(0.25) - 0.5 * np.abs(u))
    with pytest.raises(InvalidParameter):
        ald_logdensity(0.0, 0.5, 0.0)


@pytest.mark.parametrize("q,alpha", [(0.1, 1.0), (0.5, 0.3), (0.85, 2.5)])
def test_ald_integrates_to_one(q, alpha):
    u = np.linspace(-400 * alpha, 400 * alpha, 1_600_001)
    assert np.trapezoid(np.exp(ald_logdensity(u, q, alpha)), u) == pytest.approx(1.0, abs=1e-6)


def test_line_search_is_exact(rng):
    u, a = rng.normal(size=30), rng.normal(size=30)
    t, i = line_search(u, a, 0.3)
    grid = np.linspace(t - 1, t + 1, 2001)
    vals = [np.sum(check_loss(u - s * a, 0.3)) for s in grid]
    assert np.sum(check_loss(u - t * a, 0.3)) <= min(vals) + 1e-12
    assert abs(u[i] - t * a[i]) < 1e-12


def test_intercept_only_is_sample_quantile(rng):
    for _ in range(10):
        y = rng.normal(size=51)
        for q in np.arange(1, 10) / 10:
            fit = fit_qrem(np.ones((51, 1)), y, q)
            assert fit.beta[0] == pytest.approx(np.quantile(y, q, method="inverted_cdf"), abs=1e-4)


def test_noiseless_median_recovers_truth(rng):
    X = np.column_stack([np.ones(60), rng.uniform(size=(60, 2))])
    b = np.array([1.5, -2.0, 0.7])
    fit = fit_qrem(X, X @ b, 0.5)
    np.testing.assert_allclose(fit.beta, b, atol=1e-8)


@pytest.mark.parametrize("q", [0.1, 0.5, 0.75])
def test_scenario13_matches_lp(q):
    s = get_scenario("13")
    d = generate(s, RngStream(13))
    X = design_matrix(d.X, s.design_terms())
    fit = fit_qrem(X, d.y, q)
    best, b_lp = lp_qr(X, d.y, q)
    assert fit.objective <= best * (1 + 1e-6) + 1e-9
    # sub-sample against the vertex enumeration oracle
    idx = RngStream(5).generator().choice(len(d.y), 12, replace=False)
    sub = fit_qrem(X[idx][:, :3], d.y[idx], q)
    assert sub.objective <= brute_force_qr(X[idx][:, :3], d.y[idx], q)[0] + 1e-3 * 12


def test_small_instances_match_brute_force(rng):
    for _ in range(25):
        n, P = int(rng.integers(8, 25)), int(rng.integers(1, 4))
        X = np.column_stack([np.ones(n), rng.normal(size=(n, P - 1))])
        y = X @ rng.normal(size=P) + rng.standard_t(2, n)
        q = float(rng.uniform(0.05, 0.95))
        best, _ = brute_force_qr(X, y, q)
        assert fit_qrem(X, y, q).objective == pytest.approx(best, rel=1e-6, abs=1e-12)


def test_residual_and_trace_invariants(rng):
    X = np.column_stack([np.ones(200), rng.uniform(size=200)])
    y = 1 + 2 * X[:, 1] + rng.normal(size=200) * (0.2 + X[:, 1])
    for q in (0.1, 0.5, 0.9):
        fit = fit_qrem(X, y, q)
        np.testing.assert_allclose(fit.residuals, y - X @ fit.beta, atol=1e-10)
        assert np.all(np.diff(fit.objective_trace) <= 1e-8)
        assert fit.converged
        n = len(y)
        assert np.sum(fit.residuals < -fit.zero_guard) <= n * q
        assert np.sum(fit.residuals > fit.zero_guard) <= n * (1 - q)


def test_equivariance(rng):
    X = np.column_stack([np.ones(150), rng.normal(size=(150, 2))])
    y = X @ [1.0, 0.5, -1.0] + rng.laplace(size=150)
    b = np.array([0.3, -2.0, 4.0])
    for q in (0.25, 0.6):
        f0 = fit_qrem(X, y, q)
        f1 = fit_qrem(X, 3.0 * y + X @ b, q)
        np.testing.assert_allclose(f1.beta, 3.0 * f0.beta + b, atol=1e-6)


def test_guard_insensitivity(rng):
    X = np.column_stack([np.ones(300), rng.uniform(size=300)])
    y = X @ [2.0, 1.0] + rng.normal(size=300)
    sc = robust_scale(y)
    fits = [fit_qrem(X, y, 0.3, QremOptions(zero_guard=g * sc)) for g in (1e-8, 1e-6, 1e-4)]
    for f in fits[1:]:
        np.testing.assert_allclose(f.beta, fits[0].beta, atol=1e-6)


def test_polished_fit_satisfies_certificate(rng):
    X = np.column_stack([np.ones(80), rng.normal(size=80)])
    y = X @ [0.0, 1.0] + rng.normal(size=80)
    fit = fit_qrem(X, y, 0.4)
    h = np.argsort(np.abs(fit.residuals))[:2]
    assert basis_is_optimal(X, y, 0.4, h)


def test_nonconvergence_is_flagged(rng):
    X = np.column_stack([np.ones(100), rng.normal(size=100)])
    y = rng.normal(size=100)
    fit = fit_qrem(X, y, 0.5, QremOptions(max_iter=1, polish=False))
    assert not fit.converged and fit.iterations == 1


def test_errors():
    with pytest.raises(RankDeficient):
        fit_qrem(np.ones((2, 2)), [1.0, 2.0], 0.5)
    for q in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(InvalidParameter):
            fit_qrem(np.ones((5, 1)), np.arange(5.0), q)


def test_goodness_of_fit(rng):
    X = np.column_stack([np.ones(20), rng.normal(size=20)])
    fit = fit_qrem(X, X @ [1.0, 2.0], 0.5)
    assert goodness_of_fit(fit)["G"] == pytest.approx(0.0, abs=1e-9)
    y = X @ [1.0, 2.0] + rng.normal(size=20)
    g1 = goodness_of_fit(fit_qrem(X, y, 0.3))
    g2 = goodness_of_fit(fit_qrem(np.vstack([X, X]), np.concatenate([y, y]), 0.3))
    assert g2["G"] == pytest.approx(2 * g1["G"], rel=1e-9)
    assert g1["aic"] == pytest.approx(2 * g1["G"] + 4)
    assert g1["mean_check"] == pytest.approx(g1["G"] / 40)


def test_scenario23_quadratic_beats_linear():
    s = get_scenario("23")
    d = generate(s, RngStream(23))
    x = d.X[:, 0]
    lin = fit_qrem(np.column_stack([np.ones_like(x), x]), d.y, 0.1)
    quad = fit_qrem(np.column_stack([np.ones_like(x), x, x * x]), d.y, 0.1)
    assert goodness_of_fit(lin)["G"] > goodness_of_fit(quad)["G"]


def test_asymptotic_cov_scaling(rng):
    X = np.column_stack([np.ones(100), rng.normal(size=100)])
    y = X @ [1.0, 1.0] + rng.normal(size=100)
    fit = fit_qrem(X, y, 0.3)
    c1 = asymptotic_cov(fit, X, f0=0.4)
    fit2 = fit_qrem(np.vstack([X, X]), np.concatenate([y, y]), 0.3)
    c2 = asymptotic_cov(fit2, np.vstack([X, X]), f0=0.4)
    np.testing.assert_allclose(c2.cov, c1.cov / 2, rtol=1e-10)
    fit7 = fit_qrem(X, y, 0.7)
    np.testing.assert_allclose(asymptotic_cov(fit7, X, f0=0.4).cov, c1.cov, rtol=1e-12)
    assert np.allclose(c1.cov, c1.cov.T)
    np.testing.assert_allclose(c1.se, np.sqrt(np.diag(c1.cov)))
    assert np.all(np.linalg.eigvalsh(c1.cov) >= 0)


def test_asymptotic_se_intercept_only():
    sigma, n = 0.7, 2000
    y = RngStream(77).generator().normal(0, sigma, n)
    fit = fit_qrem(np.ones((n, 1)), y, 0.5)
    se = asymptotic_cov(fit, np.ones((n, 1))).se[0]
    assert se == pytest.approx(np.sqrt(0.25 * 2 * np.pi * sigma**2 / n), rel=0.15)


def test_degenerate_density():
    X = np.ones((10, 1))
    fit = fit_qrem(X, np.arange(10.0), 0.5)
    with pytest.raises(DegenerateDensity):
        asymptotic_cov(fit, X, f0=0.0)
