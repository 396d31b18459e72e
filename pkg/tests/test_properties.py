"""Property-based checks with hypothesis."""

import json

import numpy as np
from conftest import brute_force_qr
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qremkit import cli
from qremkit.diagnostics import SignResiduals, qq_pairs, sign_residuals
from qremkit.numkit import RngStream, kde_at_zero, solve_wls
from qremkit.qrem import check_loss, fit_qrem
from qremkit.select import class_posterior
from qremkit.simlab import format_poly, parse_poly

SETTINGS = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
quantiles = st.floats(0.02, 0.98)


@SETTINGS
@given(arrays(float, st.integers(1, 30), elements=finite), quantiles, st.floats(0.01, 100))
def test_check_loss_nonnegative_and_homogeneous(u, q, a):
    loss = check_loss(u, q)
    assert np.all(loss >= 0)
    np.testing.assert_allclose(check_loss(a * u, q), a * loss, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(check_loss(-u, 1 - q), loss, rtol=1e-12, atol=1e-12)


@SETTINGS
@given(st.integers(0, 2**32 - 1), st.integers(6, 30), st.floats(1e-3, 1e3))
def test_wls_weight_scale_invariance(seed, n, c):
    g = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), g.normal(size=(n, 2))])
    y, w = g.normal(size=n), g.uniform(0.1, 3, n)
    np.testing.assert_allclose(solve_wls(X, y, w), solve_wls(X, y, c * w), rtol=1e-8, atol=1e-10)


@SETTINGS
@given(arrays(float, st.integers(2, 50), elements=st.floats(-50, 50)))
def test_kde_symmetric(u):
    assume(np.ptp(u) > 1e-6)
    assert kde_at_zero(u) == kde_at_zero(-u)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(5, 14), st.integers(1, 2), quantiles)
def test_fit_reaches_vertex_minimum(seed, n, P, q):
    g = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), g.normal(size=(n, P - 1))])
    y = g.normal(size=n)
    best, _ = brute_force_qr(X, y, q)
    fit = fit_qrem(X, y, q)
    assert fit.objective <= best * (1 + 1e-6) + 1e-12
    assert np.all(np.diff(fit.objective_trace) <= 1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), quantiles, st.floats(0.1, 10), st.floats(-5, 5))
def test_fit_equivariance(seed, q, a, b):
    g = np.random.default_rng(seed)
    X = np.column_stack([np.ones(40), g.uniform(size=40)])
    y = g.normal(size=40)
    f0, f1 = fit_qrem(X, y, q), fit_qrem(X, a * y + b, q)
    np.testing.assert_allclose(f1.beta, a * f0.beta + [b, 0.0], atol=1e-6 * max(1, a))


@SETTINGS
@given(arrays(float, st.integers(1, 40), elements=finite), quantiles)
def test_sign_residual_partition(u, q):
    class F:
        pass

    f = F()
    f.residuals, f.q, f.zero_guard = u, q, 1e-9
    sr = sign_residuals(f)
    idx = np.sort(np.concatenate([sr.above, sr.below, sr.zero]))
    np.testing.assert_array_equal(idx, np.arange(len(u)))
    assert np.all((sr.c == 2 * q) == np.isin(np.arange(len(u)), sr.above))


@SETTINGS
@given(st.integers(0, 2**32 - 1), st.integers(2, 30), st.integers(2, 30))
def test_qq_pairs_swap(seed, na, nb):
    g = np.random.default_rng(seed)
    x = g.normal(size=na + nb)
    idx = g.permutation(na + nb)
    A, B = idx[:na], idx[na:]
    z = np.array([], int)
    qa, qb = qq_pairs(x, SignResiduals(0.5, np.zeros(na + nb), A, B, z))
    rb, ra = qq_pairs(x, SignResiduals(0.5, np.zeros(na + nb), B, A, z))
    np.testing.assert_array_equal(qa, ra)
    np.testing.assert_array_equal(qb, rb)
    assert np.all(np.diff(qa) >= 0) and len(qa) == min(na, nb)


@SETTINGS
@given(arrays(float, (7, 2), elements=st.floats(-700, 700)), st.floats(0.01, 0.98), st.floats(0.01, 0.98))
def test_class_posterior_rows(lo, a, b):
    assume(a + b < 0.99)
    post = class_posterior(lo, np.array([a, 1 - a - b, b]))
    assert np.all(post >= 0)
    np.testing.assert_allclose(post.sum(1), 1.0, atol=1e-12)


json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-10**12, 10**12) | st.floats(allow_nan=False, allow_infinity=False)
    | st.text(max_size=8),
    lambda c: st.lists(c, max_size=4) | st.dictionaries(st.text(max_size=5), c, max_size=4),
    max_leaves=15,
)


@SETTINGS
@given(json_values)
def test_json_canonical_round_trip(obj):
    text = cli.dumps(obj)
    assert cli.dumps(json.loads(text)) == text


@SETTINGS
@given(st.lists(st.integers(1, 98), min_size=1, max_size=8, unique=True))
def test_parse_q_lists(vals):
    qs = sorted(v / 100 for v in vals)
    assert cli.parse_q(",".join(repr(q) for q in qs)) == qs


@SETTINGS
@given(st.dictionaries(st.lists(st.integers(0, 3), max_size=3).map(lambda m: tuple(sorted(m))),
                       st.floats(-100, 100, allow_nan=False).filter(lambda c: c != 0), min_size=1, max_size=5))
def test_poly_round_trip(poly):
    assert parse_poly(format_poly(poly)) == poly


@SETTINGS
@given(st.integers(0, 2**63 - 1), st.integers(0, 1000), st.integers(0, 1000))
def test_rng_streams(seed, a, b):
    s = RngStream(seed)
    x = s.spawn(a).generator().random(4)
    np.testing.assert_array_equal(x, s.spawn(a).generator().random(4))
    if a != b:
        assert not np.array_equal(x, s.spawn(b).generator().random(4))
