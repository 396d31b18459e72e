"""Adequacy checks for fitted quantile models.

At the q-th quantile the sign residuals ``c = sign(u) - (1 - 2q)`` are
orthogonal to every column of the design, so under a correct model the
values of a predictor among observations above the fit (set A) and below
it (set B) follow the same distribution. The checks here compare those
two samples: paired quantiles for a Q-Q plot, a two-sample KS bound, the
"flat" Q-Q ratio matrix across a grid of quantiles, and per-level shares
for categorical predictors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import binomtest, ks_2samp

from .errors import EmptySide, InvalidParameter, SparseLevel

KS_CONST = 1.63  # two-sample KS critical constant at the 1% level


@dataclass
class SignResiduals:
    q: float
    c: np.ndarray
    above: np.ndarray
    below: np.ndarray
    zero: np.ndarray

    @property
    def n(self) -> int:
        return len(self.c)


def sign_residuals(fit, zero_tol=None) -> SignResiduals:
    """Classify observations as above, below, or on the fitted quantile.

    Residuals with ``|u| <= zero_tol`` (the fit's zero guard by default) are
    interpolated points; their ``c`` is ``2q - 1`` since ``sign(0) = 0``.
    """
    u = np.asarray(fit.residuals, dtype=float)
    tol = fit.zero_guard if zero_tol is None else zero_tol
    q = fit.q
    zero = np.abs(u) <= tol
    above = (u > 0) & ~zero
    below = (u < 0) & ~zero
    c = np.where(above, 2 * q, np.where(below, 2 * q - 2, 2 * q - 1))
    return SignResiduals(
        q=q, c=c, above=np.flatnonzero(above), below=np.flatnonzero(below), zero=np.flatnonzero(zero)
    )


def orthogonality_gap(X, sr: SignResiduals) -> float:
    """``max_j |X_j' c|``; zero at an exact fit without interpolated points."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return float(np.max(np.abs(X.T @ sr.c)))


def _sides(x_col, sr):
    x = np.asarray(x_col, dtype=float).ravel()
    if len(x) != sr.n:
        raise InvalidParameter("predictor length differs from the number of residuals")
    if sr.above.size == 0 or sr.below.size == 0:
        raise EmptySide(f"above: {sr.above.size}, below: {sr.below.size}")
    return x[sr.above], x[sr.below]


def qq_pairs(x_col, sr: SignResiduals):
    """Matched quantiles of the predictor over A (first) and B (second).

    Uses ``min(|A|, |B|)`` equally spaced probability points and
    linear-interpolation empirical quantiles.
    """
    xa, xb = _sides(x_col, sr)
    m = min(len(xa), len(xb))
    p = np.linspace(0.0, 1.0, m) if m > 1 else np.array([0.5])
    return np.quantile(xa, p), np.quantile(xb, p)


@dataclass
class KSCheck:
    statistic: float
    bound: float

    @property
    def passed(self) -> bool:
        return self.statistic < self.bound


def ks_check(x_col, sr: SignResiduals, const=KS_CONST) -> KSCheck:
    """Two-sample Kolmogorov distance between the A and B predictor values.

    The bound ``const * sqrt((|A| + |B|) / (|A| |B|))`` is the large-sample
    critical value; ``1.63`` gives a 1% test.
    """
    xa, xb = _sides(x_col, sr)
    na, nb = len(xa), len(xb)
    stat = ks_2samp(xa, xb).statistic
    return KSCheck(float(stat), float(const * np.sqrt((na + nb) / (na * nb))))


@dataclass
class FlatQQ:
    quantile_grid: np.ndarray
    xi_grid: np.ndarray
    ratios: np.ndarray  # L x len(quantile_grid), NaN marks a missing cell
    n_emp: np.ndarray
    n_theo: np.ndarray

    def outside(self, lo=0.8, hi=1.25) -> np.ndarray:
        """Boolean mask of defined cells outside ``[lo, hi]``."""
        r = self.ratios
        with np.errstate(invalid="ignore"):
            return np.isfinite(r) & ((r < lo) | (r > hi))

    def band_holds(self, lo=0.8, hi=1.25) -> np.ndarray:
        """Per-quantile flag: every defined cell lies in ``[lo, hi]``."""
        return ~self.outside(lo, hi).any(axis=0)

    def long_rows(self):
        for j, q in enumerate(self.quantile_grid):
            for i, xi in enumerate(self.xi_grid):
                yield float(q), float(xi), float(self.ratios[i, j])


def flat_qq(fits, x_col, L=20, xi=None) -> FlatQQ:
    """Flat Q-Q matrix ``r_q(xi) = n_e(xi) / n_t(xi)``.

    For each fit the A-side quantiles of ``qq_pairs`` play the empirical
    role and the B-side quantiles the theoretical role; ``n_e`` and
    ``n_t`` count those strictly smaller than ``xi``. ``xi`` defaults to
    ``L`` equally spaced points over the range of ``x_col``. Cells with
    ``n_t = 0`` are NaN. A fit with an empty side yields an all-NaN column.
    """
    fits = list(fits)
    if not fits:
        raise InvalidParameter("need at least one fit")
    x = np.asarray(x_col, dtype=float).ravel()
    if xi is None:
        if L < 2:
            raise InvalidParameter("L must be at least 2")
        xi = np.linspace(x.min(), x.max(), L)
    xi = np.asarray(xi, dtype=float)
    qs = np.array([f.q for f in fits])
    ne = np.zeros((len(xi), len(fits)), dtype=int)
    nt = np.zeros_like(ne)
    ratios = np.full(ne.shape, np.nan)
    for j, f in enumerate(fits):
        try:
            qa, qb = qq_pairs(x, sign_residuals(f))
        except EmptySide:
            continue
        ne[:, j] = np.searchsorted(np.sort(qa), xi, side="left")
        nt[:, j] = np.searchsorted(np.sort(qb), xi, side="left")
        ok = nt[:, j] > 0
        ratios[ok, j] = ne[ok, j] / nt[ok, j]
    return FlatQQ(quantile_grid=qs, xi_grid=xi, ratios=ratios, n_emp=ne, n_theo=nt)


@dataclass
class LevelBalance:
    level: object
    count: int
    above: int
    share: float
    expected: float
    p_value: float


def categorical_balance(level_labels, sr: SignResiduals, min_count=5) -> list[LevelBalance]:
    """Share of above-the-fit observations per level against ``1 - q``.

    Interpolated points are left out of both counts. The p-value is the
    exact two-sided binomial test.
    """
    labels = np.asarray(level_labels)
    if len(labels) != sr.n:
        raise InvalidParameter("label length differs from the number of residuals")
    keep = np.ones(sr.n, bool)
    keep[sr.zero] = False
    in_a = np.zeros(sr.n, bool)
    in_a[sr.above] = True
    levels = np.unique(labels)
    if len(levels) < 2:
        raise SparseLevel("need at least two levels")
    out = []
    for lev in levels:
        m = (labels == lev) & keep
        n_l = int(m.sum())
        if n_l < min_count:
            raise SparseLevel(f"level {lev!r} has {n_l} observations (< {min_count})")
        a = int(in_a[m].sum())
        p = binomtest(a, n_l, 1.0 - sr.q).pvalue
        out.append(LevelBalance(lev, n_l, a, a / n_l, 1.0 - sr.q, float(min(p, 1.0))))
    return out
