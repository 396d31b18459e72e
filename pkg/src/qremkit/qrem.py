"""Fixed-effects quantile regression by EM.

The asymmetric Laplace likelihood is written as a normal scale mixture with
exponential mixing variances. The E-step sets each latent variance to the
absolute residual and the M-step is a weighted least squares fit to the
shifted response ``y - (1 - 2q) w``. Each M-step minimizes a quadratic
majorizer of the check loss, so the objective decreases monotonically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDensity, InvalidParameter, RankDeficient
from .numkit import as_matrix, kde_at_zero, solve_wls


def check_quantile(q) -> float:
    q = float(q)
    if not 0.0 < q < 1.0:
        raise InvalidParameter(f"quantile must lie in (0, 1), got {q}")
    return q


def check_loss(u, q):
    """Check (pinball) loss ``u * (q - 1[u < 0])``, elementwise."""
    u = np.asarray(u, dtype=float)
    out = u * (q - (u < 0))
    return float(out) if out.ndim == 0 else out


def ald_logdensity(u, q, alpha=1.0):
    """Log density of the asymmetric Laplace law with scale ``alpha``."""
    if not alpha > 0:
        raise InvalidParameter("alpha must be positive")
    q = check_quantile(q)
    return np.log(q * (1 - q) / alpha) - check_loss(np.asarray(u, dtype=float) / alpha, q)


def robust_scale(y) -> float:
    y = np.asarray(y, dtype=float)
    s = 1.4826 * np.median(np.abs(y - np.median(y)))
    if not s > 0:
        s = np.std(y)
    return float(s) if s > 0 else 1.0


@dataclass
class QremOptions:
    """Controls for :func:`fit_qrem`.

    ``epsilon`` and ``zero_guard`` default to ``1e-8 * n`` and
    ``1e-6 * scale(y)`` where scale is the normalized MAD of the response.
    With ``polish`` on, the iterate is snapped every ``check_every`` steps to
    the interpolating fit through its ``P`` smallest residuals and returned
    early if that fit passes the subgradient optimality check. When EM
    stalls (or hits ``max_iter``) up to ``max_pivots`` exchange steps finish
    the job from the snapped basis.
    """

    epsilon: float | None = None
    max_iter: int = 1000
    zero_guard: float | None = None
    polish: bool = True
    check_every: int = 25
    max_pivots: int = 50

    def resolve(self, y):
        n = len(y)
        eps = self.epsilon if self.epsilon is not None else 1e-8 * n
        guard = self.zero_guard if self.zero_guard is not None else 1e-6 * robust_scale(y)
        if not eps > 0 or not guard > 0:
            raise InvalidParameter("epsilon and zero_guard must be positive")
        return eps, guard


@dataclass
class QuantileFit:
    q: float
    beta: np.ndarray
    weights: np.ndarray
    residuals: np.ndarray
    iterations: int
    objective_trace: np.ndarray
    converged: bool
    monitor_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    zero_guard: float = 0.0
    polished: bool = False

    @property
    def objective(self) -> float:
        return float(np.sum(check_loss(self.residuals, self.q)))

    @property
    def n(self) -> int:
        return len(self.residuals)

    @property
    def n_params(self) -> int:
        return len(self.beta)


def ols_start(X, y):
    """OLS, falling back to a 1e-8 ridge when X'X is singular."""
    try:
        return solve_wls(X, y, np.ones(len(y)))
    except RankDeficient:
        P = X.shape[1]
        return np.linalg.solve(X.T @ X + 1e-8 * np.eye(P), X.T @ y)


def _monitor(X, y, beta, w, shift):
    r = y - X @ beta - shift
    return -0.5 * np.sum(r * r / w)


def line_search(u, a, q):
    """Exact minimizer over t of ``sum(check_loss(u - t * a, q))``.

    The loss is convex and piecewise linear in ``t`` with kinks at
    ``u_i / a_i``; its minimizer is a weighted quantile of the kinks.
    Returns ``(t, i)`` where ``i`` is the row whose residual hits zero.
    """
    nz = np.flatnonzero(np.abs(a) > 0)
    if nz.size == 0:
        return 0.0, -1
    an, un = a[nz], u[nz]
    t = un / an
    wt = np.abs(an)
    qi = np.where(an > 0, q, 1.0 - q)
    order = np.argsort(t, kind="stable")
    k = np.searchsorted(np.cumsum(wt[order]), np.sum(wt * qi))
    k = order[min(k, len(t) - 1)]
    return float(t[k]), int(nz[k])


def _basis_duals(X, y, q, h):
    Xh = X[h]
    b = np.linalg.solve(Xh, y[h])
    u = y - X @ b
    rest = np.ones(len(y), bool)
    rest[h] = False
    psi = q - (u[rest] < 0)
    g = np.linalg.solve(Xh.T, -X[rest].T @ psi)
    return b, u, g


def basis_is_optimal(X, y, q, h, tol=1e-9) -> bool:
    """Subgradient optimality of the fit interpolating rows ``h``.

    The basic solution minimizes the check loss iff some ``g`` in
    ``[q-1, q]^P`` solves ``X_h' g = -X_rest' psi(u_rest)`` with
    ``psi(u) = q - 1[u < 0]``.
    """
    _, _, g = _basis_duals(X, y, q, np.asarray(h))
    return bool(np.all(g >= q - 1 - tol) and np.all(g <= q + tol))


def _pick_basis(X, u):
    """Rows with the smallest ``|u|`` that span the column space of ``X``.

    Rows that add no rank (duplicates, collinear rows) are skipped. Returns
    ``None`` if the residual ordering never reaches full rank.
    """
    P = X.shape[1]
    order = np.argsort(np.abs(u), kind="stable")
    h = list(order[:P])
    if np.linalg.matrix_rank(X[h]) == P:
        return np.array(h)
    h, Q = [], np.zeros((0, P))
    for i in order:
        r = X[i] - Q.T @ (Q @ X[i])
        nr = np.linalg.norm(r)
        if nr > 1e-10 * max(1.0, np.linalg.norm(X[i])):
            h.append(i)
            Q = np.vstack([Q, r / nr])
            if len(h) == P:
                return np.array(h)
    return None


def vertex_descent(X, y, q, beta, max_pivots=0, tol=1e-9):
    """Snap ``beta`` to the basis of its P smallest residuals and certify it.

    Rows that would make the basis singular are passed over in favour of
    the next smallest residuals.

    With ``max_pivots > 0``, a failed certificate is followed by exchange
    steps: the basis row with the most violated dual leaves along the edge
    that keeps the other rows interpolated, with an exact line search.
    Returns ``(beta, objective, certified)`` or ``None`` when the basis is
    singular.
    """
    P = X.shape[1]
    h = _pick_basis(X, y - X @ beta)
    if h is None:
        return None
    best = None
    for _ in range(max_pivots + 1):
        if np.linalg.cond(X[h]) > 1e12:
            return best
        b, u, g = _basis_duals(X, y, q, h)
        obj = float(np.sum(check_loss(u, q)))
        if best is not None and obj > best[1]:
            return best
        hi, lo = g - q, (q - 1) - g
        viol = np.maximum(hi, lo)
        j = int(np.argmax(viol))
        if viol[j] <= tol:
            return b, obj, True
        best = (b, obj, False)
        s = 1.0 if hi[j] > lo[j] else -1.0
        e = np.zeros(P)
        e[j] = -s
        d = np.linalg.solve(X[h], e)
        t, k = line_search(u, X @ d, q)
        if not t > 0 or k < 0 or k in h:
            return best
        h = h.copy()
        h[j] = k
    return best


def fit_qrem(X, y, q, opts: QremOptions | None = None, beta0=None) -> QuantileFit:
    """Quantile regression of ``y`` on ``X`` at quantile ``q`` by EM.

    ``X`` must already contain an intercept column if one is wanted.
    Non-convergence is reported through ``fit.converged``.
    """
    opts = opts or QremOptions()
    q = check_quantile(q)
    y = np.asarray(y, dtype=float).ravel()
    X = as_matrix(X, len(y))
    n, P = X.shape
    if n <= P:
        raise RankDeficient(f"need n > P (n={n}, P={P})")
    eps, guard = opts.resolve(y)
    c = 1.0 - 2.0 * q

    beta = ols_start(X, y) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    u = y - X @ beta
    obj = float(np.sum(check_loss(u, q)))
    objs, mons = [obj], []
    converged = polished = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        w = np.maximum(np.abs(u), guard)
        shift = c * w
        new = solve_wls(X, y, w, shift)
        new_obj = float(np.sum(check_loss(y - X @ new, q)))
        if new_obj > obj:
            # the floor breaks exact majorization at guarded points; backtrack
            # along the step, which is a descent direction of the convex loss
            step = new - beta
            t = 0.5
            while t > 1e-10:
                cand = beta + t * step
                cand_obj = float(np.sum(check_loss(y - X @ cand, q)))
                if cand_obj <= obj:
                    new, new_obj = cand, cand_obj
                    break
                t *= 0.5
            else:
                new, new_obj = beta, obj
        delta = abs(_monitor(X, y, beta, w, shift) - _monitor(X, y, new, w, shift))
        beta, obj = new, new_obj
        u = y - X @ beta
        objs.append(obj)
        mons.append(delta)
        stalled = delta < eps
        last = it == opts.max_iter
        if opts.polish and (stalled or last or it % opts.check_every == 0):
            pivots = opts.max_pivots if (stalled or last) else 0
            snap = vertex_descent(X, y, q, beta, pivots)
            if snap is not None and snap[1] <= obj and (snap[2] or stalled or last):
                beta, obj = snap[0], snap[1]
                u = y - X @ beta
                objs.append(obj)
                polished = True
                if snap[2]:
                    converged = True
                    break
        if stalled:
            converged = True
            break

    return QuantileFit(
        q=q,
        beta=beta,
        weights=np.maximum(np.abs(u), guard),
        residuals=u,
        iterations=it,
        objective_trace=np.array(objs),
        converged=converged,
        monitor_trace=np.array(mons),
        zero_guard=guard,
        polished=polished,
    )


def goodness_of_fit(fit) -> dict:
    """``G = 2 * sum(check loss)`` and ``AIC = 2G + 2P``."""
    n = len(fit.residuals)
    mean_check = float(np.mean(check_loss(fit.residuals, fit.q)))
    G = 2.0 * n * mean_check
    return {"G": G, "aic": 2.0 * G + 2.0 * len(fit.beta), "mean_check": mean_check}


@dataclass
class AsymptoticCov:
    cov: np.ndarray
    f0: float
    se: np.ndarray
    bandwidth: float | str = "auto"


def asymptotic_cov(fit, X, bandwidth="auto", f0=None) -> AsymptoticCov:
    """Sandwich-free covariance ``q(1-q) / f(0)^2 (X'X)^-1``.

    ``f(0)`` is a kernel density estimate of the residual density at zero
    unless supplied directly through ``f0``.
    """
    X = as_matrix(X, len(fit.residuals))
    if f0 is None:
        f0 = kde_at_zero(fit.residuals, bandwidth)
    if not f0 > 1e-12:
        raise DegenerateDensity(f"residual density at zero is {f0:.3g}")
    XtX_inv = np.linalg.inv(X.T @ X)
    cov = fit.q * (1 - fit.q) / f0**2 * XtX_inv
    cov = 0.5 * (cov + cov.T)
    return AsymptoticCov(cov=cov, f0=float(f0), se=np.sqrt(np.diag(cov)), bandwidth=bandwidth)
