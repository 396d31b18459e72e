import numpy as np
import pytest
from scipy.stats import binom

from qremkit.diagnostics import (
    SignResiduals,
    categorical_balance,
    flat_qq,
    ks_check,
    orthogonality_gap,
    qq_pairs,
    sign_residuals,
)
from qremkit.errors import EmptySide, InvalidParameter, SparseLevel
from qremkit.numkit import RngStream
from qremkit.qrem import QuantileFit, fit_qrem
from qremkit.simlab import generate, get_scenario


def _fake_fit(u, q):
    u = np.asarray(u, float)
    return QuantileFit(q=q, beta=np.zeros(1), weights=np.abs(u), residuals=u, iterations=0,
                       objective_trace=np.zeros(1), converged=True, zero_guard=1e-12)


def _sr(above, below, q=0.5, n=None):
    n = n or len(above) + len(below)
    c = np.full(n, 2 * q - 1.0)
    c[above] = 2 * q
    c[below] = 2 * q - 2
    return SignResiduals(q=q, c=c, above=np.asarray(above), below=np.asarray(below), zero=np.array([], int))


def test_all_positive_residuals():
    sr = sign_residuals(_fake_fit(np.arange(1.0, 6.0), 0.25))
    np.testing.assert_allclose(sr.c, 0.5)
    assert len(sr.above) == 5 and len(sr.below) == 0


def test_partition_and_zero_marker():
    sr = sign_residuals(_fake_fit([1.0, -2.0, 0.0, 3.0, -1e-14], 0.3))
    assert sorted(np.concatenate([sr.above, sr.below, sr.zero]).tolist()) == list(range(5))
    assert sr.zero.tolist() == [2, 4]
    np.testing.assert_allclose(sr.c, [0.6, -1.4, -0.4, 0.6, -0.4])


def test_median_interpolates_one_point(rng):
    y = rng.permutation(np.arange(41.0))
    sr = sign_residuals(fit_qrem(np.ones((41, 1)), y, 0.5))
    assert len(sr.above) == len(sr.below) == 20 and len(sr.zero) == 1


def test_orthogonality_identity(rng):
    for q in (0.1, 0.37, 0.5, 0.8):
        X = np.column_stack([np.ones(300), rng.uniform(size=(300, 3))])
        y = X @ [1.0, 2.0, -1.0, 0.5] + rng.normal(size=300)
        fit = fit_qrem(X, y, q)
        sr = sign_residuals(fit)
        k = len(sr.zero)
        assert orthogonality_gap(X, sr) <= 2 * k * np.max(np.abs(X)) + 1e-6


def test_qq_pairs_identical_samples():
    x = np.array([3.0, 1.0, 2.0, 3.0, 1.0, 2.0])
    qa, qb = qq_pairs(x, _sr([0, 1, 2], [3, 4, 5]))
    np.testing.assert_array_equal(qa, qb)


def test_qq_pairs_swap_symmetry(rng):
    x = rng.normal(size=30)
    idx = rng.permutation(30)
    qa, qb = qq_pairs(x, _sr(idx[:12], idx[12:]))
    qb2, qa2 = qq_pairs(x, _sr(idx[12:], idx[:12]))
    np.testing.assert_array_equal(qa, qa2)
    np.testing.assert_array_equal(qb, qb2)
    assert len(qa) == 12
    np.testing.assert_allclose(qa, np.quantile(x[idx[:12]], np.linspace(0, 1, 12)))


def test_empty_side():
    with pytest.raises(EmptySide):
        qq_pairs(np.arange(4.0), _sr([0, 1, 2, 3], []))
    with pytest.raises(InvalidParameter):
        qq_pairs(np.arange(3.0), _sr([0, 1], [2, 3]))


def test_ks_noise_predictor_passes():
    g = RngStream(31).generator()
    X = np.column_stack([np.ones(1000), g.uniform(size=1000)])
    y = X @ [1.0, 1.0] + g.normal(size=1000)
    noise = g.normal(size=1000)
    for q in (0.25, 0.5):
        assert ks_check(noise, sign_residuals(fit_qrem(X, y, q))).passed


def test_ks_bound_formula():
    sr = _sr(list(range(30)), list(range(30, 50)))
    k = ks_check(np.arange(50.0), sr)
    assert k.bound == pytest.approx(1.63 * np.sqrt(50 / 600))
    assert k.statistic == pytest.approx(1.0) and not k.passed


def test_scenario23_ks_discriminates():
    d = generate(get_scenario("23"), RngStream(2300))
    x = d.X[:, 0]
    lin = fit_qrem(np.column_stack([np.ones_like(x), x]), d.y, 0.1)
    quad = fit_qrem(np.column_stack([np.ones_like(x), x, x * x]), d.y, 0.1)
    assert not ks_check(x, sign_residuals(lin)).passed
    assert ks_check(x, sign_residuals(quad)).passed


def _fits24(d, interaction):
    x1, x2 = d.X[:, 0], d.X[:, 1]
    cols = [np.ones_like(x1), x1, x2] + ([x1 * x2] if interaction else [])
    X = np.column_stack(cols)
    return [fit_qrem(X, d.y, q) for q in np.arange(1, 10) / 10]


def test_flat_qq_scenario24_discriminates():
    d = generate(get_scenario("24"), RngStream(2400))
    good = flat_qq(_fits24(d, True), d.X[:, 0])
    bad = flat_qq(_fits24(d, False), d.X[:, 0])
    tails = np.r_[0:3, 6:9]
    assert bad.outside()[:, tails].any()
    assert good.outside().sum() < bad.outside().sum() / 5
    assert np.all(good.band_holds()[3:6])


def test_flat_qq_identical_samples_and_missing():
    x = np.array([3.0, 1.0, 2.0, 3.0, 1.0, 2.0])
    fits = [_fake_fit([1, 1, 1, -1, -1, -1], q) for q in (0.3, 0.6)]
    f = flat_qq(fits, x, L=4)
    assert np.all(np.isnan(f.ratios[0]))  # nothing strictly below the minimum
    np.testing.assert_array_equal(f.ratios[1:], 1.0)
    assert f.ratios.shape == (4, 2)
    assert not f.outside().any()
    rows = list(f.long_rows())
    assert len(rows) == 8 and rows[0][0] == 0.3


def test_flat_qq_empty_side_column(rng):
    x = rng.normal(size=20)
    f = flat_qq([_fake_fit(np.ones(20), 0.5), _fake_fit(rng.normal(size=20), 0.5)], x, L=5)
    assert np.all(np.isnan(f.ratios[:, 0]))
    assert np.isfinite(f.ratios[1:, 1]).any()


def test_flat_qq_monotone_invariance(rng):
    x = rng.uniform(0.1, 3, 200)
    X = np.column_stack([np.ones(200), x])
    y = X @ [1.0, 1.0] + rng.normal(size=200) * x
    fits = [fit_qrem(X, y, q) for q in (0.2, 0.5, 0.8)]
    xi = np.linspace(x.min(), x.max(), 15)
    a = flat_qq(fits, x, xi=xi)
    b = flat_qq(fits, np.exp(x), xi=np.exp(xi))
    np.testing.assert_array_equal(np.isnan(a.ratios), np.isnan(b.ratios))
    np.testing.assert_array_equal(a.n_emp, b.n_emp)


def test_flat_qq_errors():
    with pytest.raises(InvalidParameter):
        flat_qq([], np.arange(3.0))
    with pytest.raises(InvalidParameter):
        flat_qq([_fake_fit([1, -1, 1], 0.5)], np.arange(3.0), L=1)


def test_categorical_balance_null():
    g = RngStream(55).generator()
    bad = 0
    for _ in range(100):
        y = g.normal(size=240)
        labels = g.choice(["a", "b", "c"], 240)
        sr = sign_residuals(fit_qrem(np.ones((240, 1)), y, 0.25))
        tab = categorical_balance(labels, sr)
        bad += any(t.p_value <= 0.01 for t in tab)
        assert all(t.expected == 0.75 for t in tab)
    assert bad <= 5


def test_categorical_all_above():
    labels = np.array(["a"] * 6 + ["b"] * 6)
    sr = _sr(list(range(6)) + [6, 8, 10], [7, 9, 11], q=0.5)
    a = categorical_balance(labels, sr)[0]
    assert a.share == 1.0 and a.expected == 0.5
    assert a.p_value == pytest.approx(2 * 0.5**6)
    sr = _sr(list(range(6)) + [6, 8, 10], [7, 9, 11], q=0.25)
    a = categorical_balance(labels, sr)[0]
    pmf = binom.pmf(np.arange(7), 6, 0.75)
    assert a.p_value == pytest.approx(min(1.0, pmf[pmf <= pmf[6] * (1 + 1e-7)].sum()))


def test_categorical_sparse():
    sr = _sr(list(range(5)), list(range(5, 10)))
    with pytest.raises(SparseLevel):
        categorical_balance(np.array(["a"] * 7 + ["b"] * 3), sr)
    with pytest.raises(SparseLevel):
        categorical_balance(np.array(["a"] * 10), sr)
