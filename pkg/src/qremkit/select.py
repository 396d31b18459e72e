"""Variable selection for quantile regression with a three-component mixture.

The selector works on a pseudo-response ``y~ = y - (1 - 2q)|u|`` and the
normal-theory model

    y~_i = b0 + sum_k x_ik g_k v_k + e_i,   v_k ~ N(mu, s2_v),   e_i ~ N(0, s2_e)

with ``g_k`` in {-1, 0, +1} drawn with probabilities ``(p_L, p_0, p_R)``.
Given the active set (columns with ``g_k != 0``) and their signs, integrating
out ``v`` leaves ``y~ ~ N(b0 + mu X_S g_S, s2_e (I + lam X_S X_S'))`` with
``lam = s2_v / s2_e``. Its likelihood is profiled over ``mu >= 0`` and
``s2_e`` in closed form and over ``lam`` by a bounded 1-d search, all through
one SVD of ``X_S``. The score of a set adds the log of the class
probabilities, estimated as posterior modes under a Dirichlet(2, 2, 2)
prior so they never hit zero.

For a column outside the set, the class posterior follows from rank-one
updates of the marginal covariance, which is how candidate moves are
screened; the best few are then scored exactly and the best single move is
taken. ``delta`` acts as a cost per included column: an add must raise the
score by more than ``delta``, and a column is dropped when it contributes
less than ``delta``. Every move raises ``score - delta |S|``, so the search
cannot cycle.

Columns are centred and scaled to unit variance before selection; the
intercept and any locked-in columns are projected out, which makes the
likelihood the restricted one for those fixed effects.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from math import ceil, lgamma

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import InvalidParameter, InvalidStrategyParams, QremError, Saturated
from .mixed import MixedSpec, fit_eqrem
from .numkit import RngStream
from .qrem import QremOptions, check_loss, check_quantile, fit_qrem

log = logging.getLogger(__name__)

LOG_DIRICHLET_NORM = lgamma(6.0) - 3 * lgamma(2.0)  # Dirichlet(2, 2, 2)
LAM_MIN, LAM_MAX = 1e-8, 1e6  # sigma_v2 / sigma_eps2 range


@dataclass
class MixtureParams:
    mu: float
    sigma_v2: float
    p_L: float
    p_0: float
    p_R: float
    sigma_eps2: float
    beta0: float = 0.0

    @property
    def probs(self):
        return np.array([self.p_L, self.p_0, self.p_R])


@dataclass
class SelectionState:
    S: list
    signs: dict
    gamma_post: np.ndarray
    params: MixtureParams
    loglik_trace: list = field(default_factory=list)
    score: float = float("nan")
    moves: int = 0
    converged: bool = True
    terminal_sets: list = field(default_factory=list)


class _Design:
    """Standardized putative columns with the fixed part projected out."""

    def __init__(self, X, locked=(), rng=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise InvalidParameter("X must be a matrix")
        self.n, self.P = X.shape
        self.locked = sorted(int(j) for j in locked)
        F = np.column_stack([np.ones(self.n)] + [X[:, j] for j in self.locked])
        Qf, _ = np.linalg.qr(F)
        self.Qf = Qf
        self.r = Qf.shape[1]
        Xc = X - Qf @ (Qf.T @ X)
        norm = np.sqrt(np.sum(Xc * Xc, axis=0))
        scale = np.sqrt(np.sum((X - X.mean(0)) ** 2, axis=0))
        ok = (norm > 1e-10 * np.maximum(scale, 1e-300)) & (scale > 0)
        ok[self.locked] = False
        self.active = ok
        with np.errstate(invalid="ignore", divide="ignore"):
            self.Z = np.where(ok, Xc / np.where(ok, norm, 1.0) * np.sqrt(self.n), 0.0)
        self.n_eff = self.n - self.r

    def project(self, y):
        y = np.asarray(y, dtype=float)
        return y - self.Qf @ (self.Qf.T @ y)


@dataclass
class _Fit:
    S: tuple
    signs: tuple
    mu: float
    lam: float
    s2: float
    loglik: float
    score: float
    U: np.ndarray
    shrink: np.ndarray  # lam d^2 / (1 + lam d^2)
    logdet: float


def _class_counts(signs, P):
    nL = sum(1 for s in signs if s < 0)
    nR = sum(1 for s in signs if s > 0)
    return nL, P - nL - nR, nR


def _class_probs(signs, P):
    nL, n0, nR = _class_counts(signs, P)
    return np.array([nL + 1, n0 + 1, nR + 1], dtype=float) / (P + 3)


def _prior_term(signs, P):
    counts = np.array(_class_counts(signs, P), dtype=float)
    p = _class_probs(signs, P)
    return float(np.sum((counts + 1) * np.log(p))) + LOG_DIRICHLET_NORM


def _fit_set(D: _Design, r0, S, signs) -> _Fit:
    """Profile the marginal likelihood of the set ``S`` with given signs."""
    n = D.n_eff
    rr = float(r0 @ r0)
    S, signs = tuple(S), tuple(signs)
    if not S:
        s2 = rr / n
        ll = -0.5 * n * (np.log(2 * np.pi * s2) + 1.0)
        return _Fit(S, signs, 0.0, 0.0, s2, ll, ll + _prior_term(signs, D.P),
                    np.zeros((D.n, 0)), np.zeros(0), 0.0)
    XS = D.Z[:, list(S)]
    U, d, _ = np.linalg.svd(XS, full_matrices=False)
    keep = d > 1e-10 * d[0]
    U, d2 = U[:, keep], d[keep] ** 2
    m = XS @ np.array(signs, dtype=float)
    Ur, Um = U.T @ r0, U.T @ m
    mm, rm = float(m @ m), float(r0 @ m)

    def profile(lam):
        c = lam * d2 / (1.0 + lam * d2)
        mOm = mm - np.sum(c * Um * Um)
        mOr = rm - np.sum(c * Um * Ur)
        rOr = rr - np.sum(c * Ur * Ur)
        mu = max(mOr / mOm, 0.0) if mOm > 1e-12 * max(mm, 1e-300) else 0.0
        Q = rOr - 2 * mu * mOr + mu * mu * mOm
        s2 = max(Q, 1e-300) / n
        logdet = float(np.sum(np.log1p(lam * d2)))
        ll = -0.5 * (n * (np.log(2 * np.pi * s2) + 1.0) + logdet)
        return ll, mu, s2, c, logdet

    # the profile can be multimodal in lam: grid first, then refine
    grid = np.logspace(np.log10(LAM_MIN), np.log10(LAM_MAX), 43)
    vals = [profile(l)[0] for l in grid]
    i = int(np.argmax(vals))
    best_lam, best = float(grid[i]), profile(grid[i])
    if 0 < i < len(grid) - 1:
        lo_t, hi_t = np.log(grid[i - 1]), np.log(grid[i + 1])
        res = minimize_scalar(lambda t: -profile(np.exp(t))[0], bounds=(lo_t, hi_t),
                              method="bounded", options={"xatol": 1e-6})
        cand = profile(np.exp(res.x))
        if cand[0] > best[0]:
            best_lam, best = float(np.exp(res.x)), cand
    ll, mu, s2, c, logdet = best
    score = ll + _prior_term(signs, D.P)
    return _Fit(S, signs, float(mu), best_lam, float(s2), float(ll), float(score), U, c, logdet)


def _omega_inv(f: _Fit, V):
    """``(I + lam X_S X_S')^-1 V`` for vectors or matrices ``V``."""
    if f.U.shape[1] == 0:
        return V
    return V - f.U @ (f.shrink[:, None] * (f.U.T @ V)) if V.ndim == 2 else V - f.U @ (f.shrink * (f.U.T @ V))


def _log_odds(D: _Design, r0, f: _Fit):
    """Per-column log marginal-likelihood ratios for g = -1, +1 against 0.

    Columns in the set are scored against the set without them by
    downdating the rank-one terms.
    """
    s2, mu, s2v = f.s2, f.mu, f.lam * f.s2
    resid = r0 - mu * (D.Z[:, list(f.S)] @ np.array(f.signs, float)) if f.S else r0
    Oi_X = _omega_inv(f, D.Z) / s2
    a = np.sum(D.Z * Oi_X, axis=0)
    b = Oi_X.T @ resid
    for k, s in zip(f.S, f.signs):
        den = 1.0 - s2v * a[k]
        den = den if den > 1e-300 else 1e-300
        b[k] = (b[k] + s * mu * a[k]) / den
        a[k] = a[k] / den
    out = np.empty((D.P, 2))
    for j, sg in enumerate((-1.0, 1.0)):
        num = b - sg * mu * a
        with np.errstate(over="ignore", invalid="ignore"):  # near-exact fits give huge odds
            out[:, j] = (-0.5 * np.log1p(s2v * a)
                         - 0.5 * (-2 * sg * mu * b + mu * mu * a - s2v * num * num / (1.0 + s2v * a)))
    out = np.nan_to_num(out, nan=0.0, posinf=1e300, neginf=-1e300)
    out[~D.active] = -np.inf
    return out


def class_posterior(log_odds, probs):
    """Normalized ``(P(g=-1), P(g=0), P(g=+1))`` rows from log odds vs 0."""
    lp = np.column_stack([log_odds[:, 0] + np.log(probs[0]),
                          np.full(len(log_odds), np.log(probs[1])),
                          log_odds[:, 1] + np.log(probs[2])])
    lp -= lp.max(axis=1, keepdims=True)
    w = np.exp(lp)
    return w / w.sum(axis=1, keepdims=True)


def _params(f: _Fit, r0, P) -> MixtureParams:
    p = _class_probs(f.signs, P)
    return MixtureParams(mu=f.mu, sigma_v2=f.lam * f.s2, p_L=p[0], p_0=p[1], p_R=p[2],
                         sigma_eps2=f.s2, beta0=0.0)


def _with(S, signs, k, s):
    pairs = sorted(list(zip(S, signs)) + [(k, s)])
    return tuple(p[0] for p in pairs), tuple(p[1] for p in pairs)


def _without(S, signs, k):
    pairs = [(j, s) for j, s in zip(S, signs) if j != k]
    return tuple(p[0] for p in pairs), tuple(p[1] for p in pairs)


def _normalize_sign(D, r0, f):
    """Keep ``mu >= 0``: if every sign flipped scores better, use that."""
    if not f.S:
        return f
    g = _fit_set(D, r0, f.S, tuple(-s for s in f.signs))
    return g if g.score > f.score + 1e-12 else f


def _semms(D: _Design, r0, S, signs, delta, max_moves, n_screen, order=None):
    S, signs = tuple(S), tuple(signs)
    f = _normalize_sign(D, r0, _fit_set(D, r0, S, signs))
    moves = 0
    converged = False
    while moves < max_moves:
        lo = _log_odds(D, r0, f)
        probs = _class_probs(f.signs, D.P)
        inset = np.zeros(D.P, bool)
        inset[list(f.S)] = True
        # screen adds by the better sign's posterior log odds against exclusion
        add_sign = np.where(lo[:, 1] + np.log(probs[2]) >= lo[:, 0] + np.log(probs[0]), 1, -1)
        add_score = np.maximum(lo[:, 1] + np.log(probs[2]), lo[:, 0] + np.log(probs[0])) - np.log(probs[1])
        add_score[inset | ~D.active] = -np.inf
        cands = []
        if len(f.S) + 1 < D.n_eff:
            top = np.argsort(-add_score, kind="stable")[:n_screen]
            cands += [("add", int(k), int(add_sign[k])) for k in top if np.isfinite(add_score[k])]
        if f.S:
            keep_score = np.array([lo[k, 1 if s > 0 else 0] for k, s in zip(f.S, f.signs)])
            for i in np.argsort(keep_score, kind="stable")[:n_screen]:
                cands.append(("drop", int(f.S[i]), 0))
        if order is not None:
            rank = {int(k): i for i, k in enumerate(order)}
            cands.sort(key=lambda c: rank[c[1]])
        best = None
        for kind, k, s in cands:
            nS, nsg = _with(f.S, f.signs, k, s) if kind == "add" else _without(f.S, f.signs, k)
            g = _normalize_sign(D, r0, _fit_set(D, r0, nS, nsg))
            # delta is an inclusion cost: a move must raise score - delta * |S|
            gain = g.score - f.score + (delta if kind == "drop" else -delta)
            if gain > 0:
                if order is not None:
                    best = (gain, k, g)
                    break
                if best is None or gain > best[0] + 1e-12 or (abs(gain - best[0]) <= 1e-12 and k < best[1]):
                    best = (gain, k, g)
        if best is None:
            converged = True
            break
        f = best[2]
        moves += 1
        if len(f.S) >= D.n - 1:
            raise Saturated(f"active set reached {len(f.S)} predictors with n={D.n}")
    gp = class_posterior(_log_odds(D, r0, f), _class_probs(f.signs, D.P))
    gp[~D.active] = [0.0, 1.0, 0.0]
    state = SelectionState(
        S=list(f.S), signs=dict(zip(f.S, f.signs)), gamma_post=gp,
        params=_params(f, r0, D.P), score=f.score, moves=moves, converged=converged,
    )
    return state


def _initial_signs(D, r0, S):
    return tuple(1 if D.Z[:, k] @ r0 >= 0 else -1 for k in S)


def semms_step(y_tilde, X, S, delta=2.0, max_moves=200, locked=(), n_screen=5, order=None,
               signs=None):
    """One run of the mixture selector from the starting set ``S``.

    Returns ``(new_S, SelectionState)``. ``order`` switches to first-improvement
    moves scanned in that column order (the randomized variant).
    """
    if not delta > 0:
        raise InvalidParameter("delta must be positive")
    D = _Design(X, locked)
    r0 = D.project(y_tilde)
    S = sorted(int(k) for k in S if D.active[int(k)])
    if len(S) >= D.n - 1:
        raise Saturated("starting set is too large")
    sg = tuple(signs[k] for k in S) if signs else _initial_signs(D, r0, S)
    state = _semms(D, r0, S, sg, delta, max_moves, n_screen, order)
    return state.S, state


# initialization ------------------------------------------------------------


def simple_qr_batch(y, X, q, max_iter=200, tol=1e-9):
    """Slope, standard error and |z| of ``y ~ 1 + x_j`` for every column.

    All P two-parameter fits run the same EM recursion side by side; the
    standard errors use the asymptotic formula with a KDE of each fit's
    residuals at zero.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, P = X.shape
    c = 1.0 - 2.0 * q
    sy = np.median(np.abs(y - np.median(y))) * 1.4826 or np.std(y) or 1.0
    guard = 1e-6 * sy
    xm = X.mean(0)
    Xc = X - xm
    sxx = np.sum(Xc * Xc, axis=0)
    ok = sxx > 0
    sxx = np.where(ok, sxx, 1.0)
    b1 = (Xc.T @ (y - y.mean())) / sxx
    b0 = y.mean() - b1 * xm
    U = y[:, None] - b0 - X * b1
    for _ in range(max_iter):
        W = 1.0 / np.maximum(np.abs(U), guard)
        T = y[:, None] - c / W
        s0 = W.sum(0)
        s1 = np.sum(W * X, 0)
        s2 = np.sum(W * X * X, 0)
        t0 = np.sum(W * T, 0)
        t1 = np.sum(W * X * T, 0)
        det = s0 * s2 - s1 * s1
        det = np.where(np.abs(det) > 0, det, 1.0)
        nb0 = (s2 * t0 - s1 * t1) / det
        nb1 = (s0 * t1 - s1 * t0) / det
        step = np.max(np.abs(nb1 - b1) + np.abs(nb0 - b0))
        b0, b1 = nb0, nb1
        U = y[:, None] - b0 - X * b1
        if step < tol * sy:
            break
    sd = np.std(U, axis=0, ddof=1)
    q1, q3 = np.percentile(U, [25, 75], axis=0)
    spread = np.minimum(sd, (q3 - q1) / 1.34)
    spread = np.where(spread > 0, spread, sd)
    h = 0.9 * np.where(spread > 0, spread, 1.0) * n ** (-0.2)
    f0 = np.mean(np.exp(-0.5 * (U / h) ** 2), axis=0) / (h * np.sqrt(2 * np.pi))
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.sqrt(q * (1 - q) / f0**2 / sxx)
        z = np.where(ok & (se > 0), np.abs(b1) / se, 0.0)
    return b1, se, z


@dataclass
class InitStrategy:
    """``one_at_a_time(K)``, ``chunked(m, K)`` or ``provided(set)``."""

    kind: str = "one_at_a_time"
    K: int = 20
    m: int | None = None
    provided: tuple = ()

    @classmethod
    def parse(cls, text: str) -> "InitStrategy":
        """Parse ``one_at_a_time:K``, ``chunked:m:K`` or ``provided:i,j,...``."""
        parts = text.strip().split(":")
        try:
            if parts[0] == "one_at_a_time":
                return cls("one_at_a_time", K=int(parts[1]) if len(parts) > 1 else 20)
            if parts[0] == "chunked":
                return cls("chunked", m=int(parts[1]), K=int(parts[2]) if len(parts) > 2 else 20)
            if parts[0] == "provided":
                idx = tuple(int(v) for v in parts[1].split(",") if v) if len(parts) > 1 else ()
                return cls("provided", provided=idx)
        except (IndexError, ValueError) as exc:
            raise InvalidStrategyParams(f"cannot parse init strategy {text!r}") from exc
        raise InvalidStrategyParams(f"unknown init strategy {parts[0]!r}")


def init_candidates(y, X, q, strategy: InitStrategy | None = None, exclude=()):
    """Initial active set ranked by single-predictor (or per-chunk) |z|."""
    strategy = strategy or InitStrategy()
    q = check_quantile(q)
    X = np.asarray(X, dtype=float)
    n, P = X.shape
    if strategy.kind == "provided":
        S = [int(k) for k in strategy.provided]
        if any(k < 0 or k >= P for k in S):
            raise InvalidStrategyParams("provided indices out of range")
        return S
    K = strategy.K
    if not 0 <= K < n:
        raise InvalidStrategyParams(f"need 0 <= K < n (K={K}, n={n})")
    if strategy.kind == "one_at_a_time":
        _, _, z = simple_qr_batch(y, X, q)
    elif strategy.kind == "chunked":
        m = strategy.m
        if m is None or not 1 <= m < n - 1:
            raise InvalidStrategyParams(f"need 1 <= m < n - 1 (m={m}, n={n})")
        z = np.zeros(P)
        from .qrem import asymptotic_cov

        for c in range(ceil(P / m)):
            cols = np.arange(c * m, min(P, (c + 1) * m))
            Xc = np.column_stack([np.ones(n), X[:, cols]])
            try:
                fit = fit_qrem(Xc, y, q)
                ac = asymptotic_cov(fit, Xc)
                z[cols] = np.abs(fit.beta[1:]) / ac.se[1:]
            except QremError as exc:
                log.info("chunk %d skipped: %s", c, exc)
    else:
        raise InvalidStrategyParams(f"unknown init strategy {strategy.kind!r}")
    z = np.where(np.isfinite(z), z, 0.0)
    z[list(exclude)] = -np.inf
    order = np.argsort(-z, kind="stable")
    return [int(k) for k in order[:K] if np.isfinite(z[k])]


# outer loop ----------------------------------------------------------------


@dataclass
class SelectOptions:
    delta: float = 2.0
    epsilon: float | None = None  # defaults to 1e-4 * n
    init: InitStrategy = field(default_factory=InitStrategy)
    max_outer: int = 20
    max_moves: int = 200
    randomized_restarts: int = 0
    rng: object = 0
    locked: tuple = ()
    groups: object = None
    qrem: QremOptions = field(default_factory=QremOptions)


def _fit_on(y, X, S, locked, q, opts):
    cols = list(locked) + [k for k in S if k not in locked]
    Xd = np.column_stack([np.ones(len(y))] + [X[:, k] for k in cols])
    if opts.groups is not None:
        spec = MixedSpec(Xd, opts.groups)
        fit = fit_eqrem(spec, y, q, opts.qrem)
    else:
        fit = fit_qrem(Xd, y, q, opts.qrem)
    return fit, cols


def _run(y, X, q, opts, S0, order):
    n = len(y)
    eps = opts.epsilon if opts.epsilon is not None else 1e-4 * n
    D = _Design(X, opts.locked)
    S = sorted(k for k in S0 if D.active[k])
    signs = None
    seen = {}
    trace = []
    fits = []
    state = None
    ell = 0.0
    for it in range(opts.max_outer):
        fit, cols = _fit_on(y, X, S, opts.locked, q, opts)
        u = fit.residuals
        prev, ell = ell, -2.0 * float(np.sum(check_loss(u, q)))
        trace.append(ell)
        fits.append((tuple(S), fit, cols))
        r0 = D.project(y - (1.0 - 2.0 * q) * np.abs(u))
        sg = tuple(signs.get(k, 0) or _initial_signs(D, r0, [k])[0] for k in S) if signs else _initial_signs(D, r0, S)
        state = _semms(D, r0, S, sg, opts.delta, opts.max_moves, 5, order)
        newS, signs = state.S, state.signs
        seen[tuple(S)] = it
        if it > 0 and abs(ell - prev) < eps:
            break
        if newS == S:
            break
        if tuple(newS) in seen:
            log.info("selection revisited an earlier set; stopping")
            break
        S = newS
    # report the fit of the final set
    if tuple(state.S) != fits[-1][0] and tuple(state.S) not in seen:
        fit, cols = _fit_on(y, X, state.S, opts.locked, q, opts)
        ell = -2.0 * float(np.sum(check_loss(fit.residuals, q)))
        trace.append(ell)
        fits.append((tuple(state.S), fit, cols))
    Sf, fit, cols = fits[-1]
    state.S = list(Sf)
    state.loglik_trace = trace
    return fit, cols, state


@dataclass
class SelectResult:
    fit: object
    columns: list  # design columns after the intercept, in fit order
    state: SelectionState

    @property
    def S(self):
        return self.state.S

    def coef(self, k):
        """Fitted coefficient of original column ``k`` (0 if not selected)."""
        return float(self.fit.beta[1 + self.columns.index(k)]) if k in self.columns else 0.0


def fit_select(y, X, q, opts: SelectOptions | None = None) -> SelectResult:
    """Alternate quantile fits on the active set with mixture selection.

    Converges when ``l = -2 sum(check loss)`` changes by less than
    ``epsilon`` between outer iterations, when the set stops changing, or
    when a set repeats. With ``randomized_restarts > 0`` the selector is
    rerun with shuffled scan orders; the best-``l`` run is returned and
    ``state.terminal_sets`` lists every distinct final set.
    """
    opts = opts or SelectOptions()
    q = check_quantile(q)
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != len(y):
        raise InvalidParameter("X must be an n x P matrix matching y")
    S0 = init_candidates(y, X, q, opts.init, exclude=opts.locked)
    best = _run(y, X, q, opts, S0, None)
    terminal = [list(best[2].S)]
    rng = opts.rng if isinstance(opts.rng, RngStream) else RngStream(int(opts.rng or 0))
    for r in range(opts.randomized_restarts):
        order = rng.spawn(r).generator().permutation(X.shape[1])
        res = _run(y, X, q, opts, S0, order)
        if list(res[2].S) not in terminal:
            terminal.append(list(res[2].S))
        if res[2].loglik_trace[-1] > best[2].loglik_trace[-1] + 1e-12:
            best = res
    fit, cols, state = best
    state.terminal_sets = terminal
    return SelectResult(fit, cols, state)


# neighborhood graph ---------------------------------------------------------


@dataclass
class QuantileGraph:
    nodes: list
    edges: list  # (from, to, q, sign, strength)
    failures: list = field(default_factory=list)  # (node, q, message)

    def adjacency(self, q) -> np.ndarray:
        idx = {v: i for i, v in enumerate(self.nodes)}
        A = np.zeros((len(self.nodes), len(self.nodes)), dtype=int)
        for a, b, qq, s, _ in self.edges:
            if np.isclose(qq, q):
                A[idx[a], idx[b]] = s
        return A

    def has_edge(self, a, b, q=None, either=False) -> bool:
        for e in self.edges:
            if q is not None and not np.isclose(e[2], q):
                continue
            if (e[0], e[1]) == (a, b) or (either and (e[0], e[1]) == (b, a)):
                return True
        return False

    def bidirectional(self, q):
        pairs = {(a, b) for a, b, qq, _, _ in self.edges if np.isclose(qq, q)}
        return sorted({tuple(sorted((a, b))) for a, b in pairs if (b, a) in pairs})

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["from", "to", "q", "sign", "strength"])
            for a, b, q, s, st in self.edges:
                w.writerow([a, b, repr(float(q)), s, repr(float(st))])

    def to_dot(self) -> str:
        lines = ["digraph quantile_graph {"]
        for v in self.nodes:
            lines.append(f'  "{v}";')
        for a, b, q, s, st in self.edges:
            color = "blue" if s > 0 else "red"
            lines.append(f'  "{a}" -> "{b}" [label="q={q:g}", color={color}, weight={st:.6g}];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def _graph_job(args):
    data, labels, a, q, opts = args
    y = data[:, a]
    others = [j for j in range(data.shape[1]) if j != a]
    try:
        res = fit_select(y, data[:, others], q, opts)
    except QremError as exc:
        return [], (labels[a], q, str(exc))
    edges = []
    for k in res.S:
        b = res.coef(k)
        if b != 0:
            edges.append((labels[a], labels[others[k]], float(q), 1 if b > 0 else -1, abs(b)))
    return edges, None


def neighborhood_graph(data, labels=None, q_grid=(0.5,), opts: SelectOptions | None = None,
                       response_cols=None, jobs=1) -> QuantileGraph:
    """Regress each node on all others and draw an edge for every selection."""
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[1] < 3:
        raise InvalidParameter("need a matrix with at least 3 columns")
    labels = list(labels) if labels is not None else [f"x{j + 1}" for j in range(data.shape[1])]
    opts = opts or SelectOptions()
    rows = range(data.shape[1]) if response_cols is None else [labels.index(c) for c in response_cols]
    tasks = [(data, labels, a, float(q), opts) for a in rows for q in q_grid]
    if jobs and jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as ex:
            out = list(ex.map(_graph_job, tasks))
    else:
        out = [_graph_job(t) for t in tasks]
    edges, fails = [], []
    for e, f in out:
        edges.extend(e)
        if f is not None:
            fails.append(f)
    return QuantileGraph(nodes=labels, edges=edges, failures=fails)
