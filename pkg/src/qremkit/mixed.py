"""Random-intercept quantile regression (EQREM) and cluster bootstrap.

Given the latent variances ``w`` from the forward step, the working model
for the shifted response ``y - (1 - 2q) w`` is a linear mixed model

    y~ = X beta + Z v + e,   v ~ N(0, s2 I),   e ~ N(0, phi diag(w))

with ``Z`` a group indicator and ``phi`` a free residual scale (the scale of
the asymmetric Laplace law; the forward step ``E[1/w | u] = 1/|u|`` does not
depend on it). The backward step estimates the ratio ``lam = s2 / phi`` by
profiled REML, then computes the GLS estimate of ``beta`` and the BLUP of
``v``. Because ``H = diag(w) + lam Z Z'`` is block diagonal with rank-one
blocks, every quantity reduces to per-group sums and one REML evaluation
costs ``O(G P^2)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionMismatch, InvalidParameter, RankDeficient, TooFewSuccessfulReps
from .numkit import RngStream, as_matrix
from .qrem import QremOptions, check_quantile, fit_qrem, ols_start, robust_scale

log = logging.getLogger(__name__)

RATIO_FLOOR = 1e-10


@dataclass
class MixedSpec:
    """Fixed design plus a single grouping factor for a random intercept."""

    X: np.ndarray
    groups: np.ndarray
    labels: list = field(default_factory=list)

    def __post_init__(self):
        self.X = as_matrix(self.X)
        g = np.asarray(self.groups)
        if g.shape != (self.X.shape[0],):
            raise DimensionMismatch("groups must have one entry per row of X")
        labels, codes = np.unique(g, return_inverse=True)
        self.groups = codes.astype(np.intp)
        if not self.labels:
            self.labels = list(labels)
        if len(self.labels) < 1:
            raise InvalidParameter("need at least one group")

    @classmethod
    def from_groups(cls, X, groups, min_groups=2):
        spec = cls(X, groups)
        if spec.G < min_groups:
            raise InvalidParameter(f"need at least {min_groups} groups, got {spec.G}")
        return spec

    @property
    def G(self) -> int:
        return len(self.labels)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def Z(self) -> np.ndarray:
        Z = np.zeros((self.n, self.G))
        Z[np.arange(self.n), self.groups] = 1.0
        return Z


@dataclass
class MixedFit:
    q: float
    beta: np.ndarray
    v: np.ndarray
    K_var: float
    weights: np.ndarray
    residuals: np.ndarray
    iterations: int
    monitor_trace: np.ndarray
    converged: bool
    variance_collapsed: bool
    resid_scale: float = 1.0
    ratio: float = 0.0
    hlik_gain_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    zero_guard: float = 0.0


class _Stats:
    """Per-group sufficient statistics of the working model at fixed ``w``.

    Cross-products are split into within-group parts (centred at the
    precision-weighted group means) and between-group parts. With extreme
    weights the textbook form ``A - a' diag(k) a`` cancels catastrophically;
    the split keeps identities such as ``sum(v) = 0`` at rounding level.
    """

    def __init__(self, X, yt, g, w, G):
        wi = 1.0 / w
        self.s = np.bincount(g, weights=wi, minlength=G)
        P = X.shape[1]
        xbar = np.empty((G, P))
        for j in range(P):
            xbar[:, j] = np.bincount(g, weights=X[:, j] * wi, minlength=G)
        xbar /= self.s[:, None]
        ybar = np.bincount(g, weights=yt * wi, minlength=G) / self.s
        Xc = X - xbar[g]
        yc = yt - ybar[g]
        Xcw = Xc * wi[:, None]
        self.Wxx = Xc.T @ Xcw
        self.Wxy = Xcw.T @ yc
        self.Wyy = float(yc @ (yc * wi))
        self.xbar, self.ybar = xbar, ybar
        self.logdet_w = float(np.sum(np.log(w)))
        self.n, self.p = X.shape

    def omega(self, lam):
        return self.s / (1.0 + lam * self.s)

    def gls(self, lam):
        """``(omega, M, m)`` with ``M beta = m`` the GLS normal equations."""
        om = self.omega(lam)
        M = self.Wxx + (self.xbar.T * om) @ self.xbar
        m = self.Wxy + self.xbar.T @ (om * self.ybar)
        return om, M, m

    def blup(self, lam, beta):
        return lam * self.omega(lam) * (self.ybar - self.xbar @ beta)

    def quad(self, lam, beta):
        """``r' H^-1 r`` for the residual ``y~ - X beta``."""
        d = self.ybar - self.xbar @ beta
        within = self.Wyy - 2.0 * self.Wxy @ beta + beta @ self.Wxx @ beta
        return float(within + np.sum(self.omega(lam) * d * d))

    def reml(self, lam):
        """REML log-likelihood at ratio ``lam`` with the scale profiled out."""
        return float(self.reml_many(np.atleast_1d(float(lam)))[0])

    def reml_many(self, lams):
        """Vectorized :meth:`reml` over an array of ratios."""
        lams = np.asarray(lams, dtype=float)
        om = self.s[None, :] / (1.0 + lams[:, None] * self.s[None, :])
        M = self.Wxx[None] + (self.xbar.T[None] * om[:, None, :]) @ self.xbar
        m = self.Wxy[None] + (om * self.ybar[None, :]) @ self.xbar
        sign, logdet_m = np.linalg.slogdet(M)
        out = np.full(len(lams), -np.inf)
        ok = sign > 0
        if not np.any(ok):
            return out
        beta = np.linalg.solve(M[ok], m[ok][..., None])[..., 0]
        d = self.ybar[None, :] - beta @ self.xbar.T
        within = (self.Wyy - 2.0 * beta @ self.Wxy
                  + np.einsum("li,ij,lj->l", beta, self.Wxx, beta))
        quad = within + np.sum(om[ok] * d * d, axis=1)
        logdet_h = self.logdet_w + np.sum(np.log1p(lams[ok, None] * self.s[None, :]), axis=1)
        df = self.n - self.p
        with np.errstate(invalid="ignore", divide="ignore"):
            val = -0.5 * (logdet_h + logdet_m[ok] + df * np.log(quad / df))
        out[ok] = np.where(quad > 0, val, -np.inf)
        return out

    def scale(self, lam, beta):
        return max(self.quad(lam, beta), 0.0) / (self.n - self.p)


def reml_ratio(stats: _Stats, lo, hi, start=None, tol=1e-3):
    """Maximize the profiled REML over ``log lam`` in ``[log lo, log hi]``.

    A grid over the whole range (or a window around ``start``) is zoomed in
    on the best point until the spacing drops below ``tol`` (in log units),
    then a parabola through the best point and its neighbours gives the
    final value. Each zoom is one
    vectorized evaluation. Returns ``(lam, collapsed)``.
    """
    a, b = np.log(lo), np.log(hi)
    if start is None:
        grid = np.linspace(a, b, 49)
    else:
        th0 = np.clip(np.log(start), a, b)
        grid = np.unique(np.clip(th0 + np.linspace(-0.5, 0.5, 21), a, b))
    grid = np.append(grid, a)
    vals = stats.reml_many(np.exp(grid))
    floor_val = vals[-1]
    grid, vals = grid[:-1], vals[:-1]
    i = int(np.argmax(vals))
    if start is not None and i in (0, len(grid) - 1) and grid[i] not in (a, b):
        grid = np.linspace(a, b, 49)
        vals = stats.reml_many(np.exp(grid))
        i = int(np.argmax(vals))
    h = grid[1] - grid[0] if len(grid) > 1 else 0.0
    th, best = grid[i], vals[i]
    while True:
        grid = np.clip(th + np.linspace(-h, h, 17), a, b)
        vals = stats.reml_many(np.exp(grid))
        j = int(np.argmax(vals))
        if vals[j] >= best:
            th, best = grid[j], vals[j]
        h = grid[1] - grid[0] if grid[-1] > grid[0] else 0.0
        if h <= tol:
            break
    if 0 < j < len(grid) - 1 and grid[j] == th:
        f0, f1, f2 = vals[j - 1], vals[j], vals[j + 1]
        den = f0 - 2 * f1 + f2
        if den < 0:
            cand = th + 0.5 * h * (f0 - f2) / den
            cv = stats.reml(np.exp(cand))
            if cv >= best:
                th, best = cand, cv
    if floor_val >= best - 1e-12:
        return lo, True
    return float(np.exp(th)), False


def _hlik(yt, X, g, w, beta, v, lam):
    r = yt - X @ beta - v[g]
    return -0.5 * np.sum(r * r / w) - 0.5 * np.sum(v * v) / lam


def fit_eqrem(spec: MixedSpec, y, q, opts: QremOptions | None = None, init=None) -> MixedFit:
    """Random-intercept quantile regression by the extended EM.

    Forward step: ``w = max(|y - X beta - Z v|, guard)``. Backward step:
    REML for the variance ratio, then GLS for ``beta`` and BLUP for ``v``,
    all on ``y - (1 - 2q) w`` with residual variances proportional to ``w``.
    Iteration stops when the conditional log-likelihood of ``y`` given
    ``(w, v)`` changes by less than ``epsilon`` between successive ``beta``.
    ``init`` may supply ``(beta, v, lam)`` to warm start.
    """
    opts = opts or QremOptions()
    q = check_quantile(q)
    y = np.asarray(y, dtype=float).ravel()
    X, g, G = spec.X, spec.groups, spec.G
    if len(y) != spec.n:
        raise DimensionMismatch("response length differs from design rows")
    n, P = X.shape
    if n <= P:
        raise RankDeficient(f"need n > P (n={n}, P={P})")
    eps, guard = opts.resolve(y)
    c = 1.0 - 2.0 * q
    scale = robust_scale(y)
    lo, hi = RATIO_FLOOR * scale, 1e8 * scale
    if G < 2:
        # a single random intercept is confounded with the fixed intercept
        return _single_group(X, y, q, opts, lo)

    if init is None:
        beta, v, lam = ols_start(X, y), np.zeros(G), None
    else:
        beta, v, lam = (np.asarray(init[0], float).copy(), np.asarray(init[1], float).copy(), init[2])
    u = y - X @ beta - v[g]
    mons, gains = [], []
    converged = collapsed = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        # forward step: latent variances given (beta, v)
        w = np.maximum(np.abs(u), guard)
        yt = y - c * w
        st = _Stats(X, yt, g, w, G)
        # backward step: REML, then BLUE, then BLUP
        lam, collapsed = reml_ratio(st, lo, hi, start=lam)
        _, M, m = st.gls(lam)
        try:
            new_beta = np.linalg.solve(M, m)
        except np.linalg.LinAlgError as exc:
            raise RankDeficient("GLS system is singular") from exc
        new_v = st.blup(lam, new_beta)
        gains.append(_hlik(yt, X, g, w, new_beta, new_v, lam) - _hlik(yt, X, g, w, beta, v, lam))
        r_old = y - X @ beta - new_v[g] - c * w
        r_new = y - X @ new_beta - new_v[g] - c * w
        delta = 0.5 * abs(np.sum(r_old * r_old / w) - np.sum(r_new * r_new / w))
        mons.append(delta)
        beta, v = new_beta, new_v
        u = y - X @ beta - v[g]
        if delta < eps:
            converged = True
            break
    phi = st.scale(lam, beta)
    if not converged:
        log.info("EQREM hit max_iter=%d at q=%.3g (last change %.3g)", opts.max_iter, q, mons[-1])

    return MixedFit(
        q=q,
        beta=beta,
        v=v,
        K_var=float(lam * phi),
        resid_scale=phi,
        ratio=float(lam),
        weights=np.maximum(np.abs(u), guard),
        residuals=u,
        iterations=it,
        monitor_trace=np.array(mons),
        converged=converged,
        variance_collapsed=collapsed,
        hlik_gain_trace=np.array(gains),
        zero_guard=guard,
    )


def _single_group(X, y, q, opts, lo):
    fit = fit_qrem(X, y, q, opts)
    w = fit.weights
    r = y - X @ fit.beta - (1.0 - 2.0 * q) * w
    phi = float(np.sum(r * r / w)) / (len(y) - X.shape[1])
    return MixedFit(
        q=q,
        beta=fit.beta,
        v=np.zeros(1),
        K_var=float(lo * phi),
        weights=w,
        residuals=fit.residuals,
        iterations=fit.iterations,
        monitor_trace=fit.monitor_trace,
        converged=fit.converged,
        variance_collapsed=True,
        resid_scale=phi,
        ratio=float(lo),
        zero_guard=fit.zero_guard,
    )


@dataclass
class BootstrapCI:
    level: float
    reps: int
    lower: np.ndarray
    upper: np.ndarray
    draws: np.ndarray
    failed: int = 0

    def interval(self, level):
        """Percentile interval at another level from the same draws."""
        a = (1.0 - level) / 2.0
        return np.quantile(self.draws, a, axis=0), np.quantile(self.draws, 1.0 - a, axis=0)

    @property
    def se(self):
        return np.std(self.draws, axis=0, ddof=1)


def _boot_one(spec, y, q, opts, rng):
    gen = rng.generator()
    pick = gen.integers(0, spec.G, spec.G)
    members = [np.flatnonzero(spec.groups == k) for k in range(spec.G)]
    rows = np.concatenate([members[k] for k in pick])
    new_groups = np.concatenate([np.full(len(members[k]), j) for j, k in enumerate(pick)])
    sub = MixedSpec(spec.X[rows], new_groups)
    fit = fit_eqrem(sub, y[rows], q, opts)
    return fit.beta if fit.converged else None


def bootstrap_ci(spec: MixedSpec, y, q, reps=200, level=0.95, rng=None, opts=None,
                 jobs=1, boot_tol=1e-6) -> BootstrapCI:
    """Cluster bootstrap: resample whole groups, refit, take percentiles.

    Replicate ``i`` uses ``rng.spawn(i)`` so results do not depend on
    ``jobs``. Non-converged replicates are dropped; fewer than 80% usable
    raises :class:`TooFewSuccessfulReps`. Unless ``opts`` sets an explicit
    ``epsilon``, replicates stop at ``boot_tol * n``: coefficient changes at
    that point are orders of magnitude below the bootstrap spread.
    """
    if reps < 50:
        raise InvalidParameter("bootstrap needs reps >= 50")
    if not 0 < level < 1:
        raise InvalidParameter("level must lie in (0, 1)")
    rng = rng if isinstance(rng, RngStream) else RngStream(int(rng or 0))
    y = np.asarray(y, dtype=float)
    opts = replace(opts) if opts is not None else QremOptions()
    if opts.epsilon is None:
        opts.epsilon = boot_tol * len(y)
    if jobs and jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as ex:
            out = list(ex.map(_boot_one, *zip(*[(spec, y, q, opts, rng.spawn(i)) for i in range(reps)])))
    else:
        out = [_boot_one(spec, y, q, opts, rng.spawn(i)) for i in range(reps)]
    good = [b for b in out if b is not None]
    if len(good) < 0.8 * reps:
        raise TooFewSuccessfulReps(f"only {len(good)} of {reps} bootstrap fits converged")
    draws = np.array(good)
    a = (1.0 - level) / 2.0
    return BootstrapCI(
        level=level,
        reps=reps,
        lower=np.quantile(draws, a, axis=0),
        upper=np.quantile(draws, 1.0 - a, axis=0),
        draws=draws,
        failed=reps - len(good),
    )
