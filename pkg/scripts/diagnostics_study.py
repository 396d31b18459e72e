#!/usr/bin/env python3
"""How often the sign-residual checks separate right and wrong models.

Scenario 23 (quadratic mean) is fitted with a line and a parabola at
q = 0.1; scenario 24 (interaction) with and without the product term over
q = 0.1..0.9.
"""

from __future__ import annotations

import argparse

import numpy as np

from qremkit import RngStream, fit_qrem, flat_qq, generate, get_scenario, goodness_of_fit, ks_check, sign_residuals

GRID = np.round(np.arange(1, 10) / 10, 1)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--reps", type=int, default=50)
    ap.add_argument("--seed", type=int, default=108)
    args = ap.parse_args()

    s = get_scenario("23")
    g = ks = 0
    for r in range(args.reps):
        d = generate(s, RngStream(args.seed).spawn(r))
        x = d.X[:, 0]
        lin = fit_qrem(np.column_stack([np.ones_like(x), x]), d.y, 0.1)
        quad = fit_qrem(np.column_stack([np.ones_like(x), x, x * x]), d.y, 0.1)
        g += goodness_of_fit(lin)["G"] > goodness_of_fit(quad)["G"]
        ks += (not ks_check(x, sign_residuals(lin)).passed) and ks_check(x, sign_residuals(quad)).passed
    print(f"scenario 23: G prefers the parabola in {g}/{args.reps}, KS separates the models in {ks}/{args.reps}")

    s = get_scenario("24")
    cells = []
    for r in range(args.reps):
        d = generate(s, RngStream(args.seed + 1).spawn(r))
        x1, x2 = d.X[:, 0], d.X[:, 1]
        full = np.column_stack([np.ones_like(x1), x1, x2, x1 * x2])
        good = flat_qq([fit_qrem(full, d.y, q) for q in GRID], x1)
        bad = flat_qq([fit_qrem(full[:, :3], d.y, q) for q in GRID], x1)
        cells.append((good.outside().sum(axis=0), bad.outside().sum(axis=0)))
    good, bad = (np.mean([c[k] for c in cells], axis=0) for k in (0, 1))
    print("scenario 24, mean cells outside [0.8, 1.25] per quantile")
    print("  q          " + " ".join(f"{q:5.1f}" for q in GRID))
    print("  interaction " + " ".join(f"{v:5.2f}" for v in good))
    print("  additive    " + " ".join(f"{v:5.2f}" for v in bad))


if __name__ == "__main__":
    main()
