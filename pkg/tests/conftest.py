from __future__ import annotations

from itertools import combinations

import numpy as np
import pytest


def brute_force_qr(X, y, q):
    """Minimum check loss over every fit interpolating P of the rows.

    Some minimizer of the check loss passes through P observations (a
    vertex of the LP feasible set), so the smallest objective among the
    basic solutions is the global minimum. All subsets are solved as one
    batched system.
    """
    n, P = X.shape
    idx = np.array(list(combinations(range(n), P)))
    Xh = X[idx]  # (m, P, P)
    ok = np.abs(np.linalg.det(Xh)) > 1e-10
    idx, Xh = idx[ok], Xh[ok]
    B = np.linalg.solve(Xh, y[idx][..., None])[..., 0]
    U = y[None, :] - B @ X.T
    obj = np.sum(U * (q - (U < 0)), axis=1)
    k = int(np.argmin(obj))
    return float(obj[k]), B[k]


def lp_qr(X, y, q):
    """Check-loss minimum from the linear program ``min q 1'u+ + (1-q) 1'u-``."""
    from scipy.optimize import linprog

    n, P = X.shape
    c = np.concatenate([np.zeros(2 * P), np.full(n, q), np.full(n, 1 - q)])
    A = np.hstack([X, -X, np.eye(n), -np.eye(n)])
    res = linprog(c, A_eq=A, b_eq=y, bounds=(0, None), method="highs")
    assert res.status == 0
    return res.fun, res.x[:P] - res.x[P:2 * P]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
