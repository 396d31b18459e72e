#!/usr/bin/env python3
"""True and false positive counts of the quantile selector on L5 and L9."""

from __future__ import annotations

import argparse
import time

import numpy as np

from qremkit import RngStream, SelectOptions, fit_select, generate, get_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default="L5")
    ap.add_argument("--q", type=float, nargs="+", default=[0.5, 0.1])
    ap.add_argument("--reps", type=int, default=100)
    ap.add_argument("--delta", type=float, default=2.0)
    ap.add_argument("--seed", type=int, default=106)
    args = ap.parse_args()

    s = get_scenario(args.scenario)
    true = set(s.true_set)
    opts = SelectOptions(delta=args.delta)
    tp = {q: [] for q in args.q}
    fp = {q: [] for q in args.q}
    t0 = time.perf_counter()
    for r in range(args.reps):
        d = generate(s, RngStream(args.seed).spawn(r))
        for q in args.q:
            S = set(fit_select(d.y, d.X, q, opts).S)
            tp[q].append(len(S & true))
            fp[q].append(len(S - true))
    for q in args.q:
        print(f"q={q:g}  TP counts {np.bincount(tp[q], minlength=len(true) + 1).tolist()}  "
              f"FP counts {np.bincount(fp[q]).tolist()}")
    print(f"{args.reps} replicates in {(time.perf_counter() - t0) / 60:.1f} min")


if __name__ == "__main__":
    main()
