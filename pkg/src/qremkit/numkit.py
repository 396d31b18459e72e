"""Numerical substrate: weighted least squares, KDE at zero, seeded sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateSample, DimensionMismatch, InvalidParameter, RankDeficient

RANK_TOL = 1e-10
_SQRT_2PI = np.sqrt(2.0 * np.pi)


def as_matrix(X, n=None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise DimensionMismatch(f"expected a 2-d design, got shape {X.shape}")
    if n is not None and X.shape[0] != n:
        raise DimensionMismatch(f"design has {X.shape[0]} rows, response has {n}")
    if not np.all(np.isfinite(X)):
        raise InvalidParameter("design contains non-finite entries")
    return X


def solve_wls(X, y, w, offset=None) -> np.ndarray:
    """Weighted least squares with variances ``w``.

    Returns ``argmin_b sum((y - offset - X b)**2 / w)``. Solved through a
    QR factorization of the precision-weighted design; the weighted
    cross-product is declared singular when its smallest/largest eigenvalue
    ratio falls below ``RANK_TOL``.
    """
    y = np.asarray(y, dtype=float)
    X = as_matrix(X, len(y))
    w = np.asarray(w, dtype=float)
    if w.shape != y.shape:
        raise DimensionMismatch("weights and response lengths differ")
    if not np.all(w > 0) or not np.all(np.isfinite(w)):
        raise InvalidParameter("weights must be positive and finite")
    if offset is not None:
        offset = np.asarray(offset, dtype=float)
        if offset.shape != y.shape:
            raise DimensionMismatch("offset and response lengths differ")
        y = y - offset
    if X.shape[0] < X.shape[1]:
        raise RankDeficient("fewer rows than columns")
    sw = 1.0 / np.sqrt(w)
    Q, R = np.linalg.qr(X * sw[:, None])
    s = np.linalg.svd(R, compute_uv=False)
    if s[-1] ** 2 <= RANK_TOL * s[0] ** 2:
        raise RankDeficient(
            f"weighted cross-product is singular (eigenvalue ratio {s[-1] ** 2 / s[0] ** 2:.3g})"
        )
    return solve_triangular(R, Q.T @ (y * sw))


def silverman_bandwidth(u) -> float:
    u = np.asarray(u, dtype=float)
    sd = np.std(u, ddof=1)
    # averaged over u and -u so the bandwidth is exactly sign-symmetric
    q = np.percentile(u, [25, 75])
    qn = np.percentile(-u, [25, 75])
    iqr = 0.5 * ((q[1] - q[0]) + (qn[1] - qn[0]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    if not spread > 0:
        raise DegenerateSample("sample has zero spread")
    return 0.9 * spread * len(u) ** (-0.2)


def kde_at_zero(u, bandwidth="auto") -> float:
    """Gaussian-kernel density estimate of the distribution of ``u`` at 0."""
    u = np.asarray(u, dtype=float).ravel()
    if u.size < 2:
        raise DegenerateSample("need at least two points")
    if np.ptp(u) == 0:
        raise DegenerateSample("all values identical")
    if bandwidth is None or (isinstance(bandwidth, str) and bandwidth.lower() == "auto"):
        h = silverman_bandwidth(u)
    else:
        h = float(bandwidth)
        if not h > 0:
            raise InvalidParameter("bandwidth must be positive")
    with np.errstate(over="ignore"):  # far-out points contribute exp(-inf) = 0
        z = u / h
        return float(np.sum(np.exp(-0.5 * z * z)) / (u.size * h * _SQRT_2PI))


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream keyed by ``(seed, stream)``.

    Backed by the counter-based Philox generator; ``spawn(i)`` derives an
    independent child stream deterministically, so replicate ``i`` of a
    simulation draws the same numbers no matter how work is scheduled.
    """

    seed: int = 0
    stream: int | tuple = 0

    def _key(self):
        s = self.stream if isinstance(self.stream, tuple) else (self.stream,)
        return tuple(int(v) for v in s)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=self._key())
        return np.random.Generator(np.random.Philox(ss))

    def spawn(self, i: int) -> "RngStream":
        return RngStream(self.seed, self._key() + (int(i),))


def _gen(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    return RngStream(int(rng or 0)).generator()


def sample(dist: str, params, n: int, rng) -> np.ndarray:
    """Draw ``n`` iid variates.

    ``dist`` is one of ``uniform(a, b)``, ``normal(mean, sd)``,
    ``lognormal(meanlog, sdlog)`` or ``exponential(rate)``.
    """
    g = _gen(rng)
    params = tuple(float(p) for p in np.atleast_1d(params))
    if dist == "uniform":
        a, b = params
        if not a < b:
            raise InvalidParameter("uniform needs a < b")
        return g.uniform(a, b, n)
    if dist == "normal":
        m, s = params
        if not s > 0:
            raise InvalidParameter("sd must be positive")
        return g.normal(m, s, n)
    if dist == "lognormal":
        m, s = params
        if not s > 0:
            raise InvalidParameter("sdlog must be positive")
        return g.lognormal(m, s, n)
    if dist == "exponential":
        (rate,) = params
        if not rate > 0:
            raise InvalidParameter("rate must be positive")
        return g.exponential(1.0 / rate, n)
    raise InvalidParameter(f"unknown distribution {dist!r}")
