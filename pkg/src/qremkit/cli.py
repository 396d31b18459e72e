"""Command-line front end.

Commands: ``fit``, ``fit-mixed``, ``select``, ``diagnose`` and ``simulate``.
Every command writes ``results.json`` (schema ``qremkit/1``) under
``--out-dir`` plus command-specific CSV tables. Flags can also be set with
``QREMKIT_<FLAG>`` environment variables (e.g. ``QREMKIT_SEED=7``); the
command line wins.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .diagnostics import categorical_balance, flat_qq, ks_check, orthogonality_gap, qq_pairs, sign_residuals
from .errors import EmptyData, EmptySide, InvalidParameter, MissingValue, ParseError, QremError, SparseLevel
from .mixed import MixedSpec, bootstrap_ci, fit_eqrem
from .numkit import RngStream
from .qrem import QremOptions, asymptotic_cov, check_quantile, fit_qrem, goodness_of_fit
from .select import InitStrategy, SelectOptions, fit_select, neighborhood_graph

SCHEMA = "qremkit/1"
MISSING = {"", "NA", "NaN", "nan", "null"}

log = logging.getLogger("qremkit")


# canonical JSON ------------------------------------------------------------


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    s = "%.17g" % x
    if not any(c in s for c in ".en"):
        s += ".0"  # keep floats distinguishable from ints on reload
    return s


def dumps(obj, indent=2, _level=0) -> str:
    """Deterministic JSON: sorted keys, floats at 17 significant digits, NaN as null."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(obj[k], indent, _level + 1)}" for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, set)):
        seq = sorted(obj) if isinstance(obj, set) else obj
        if not seq:
            return "[]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in seq) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, obj):
    Path(path).write_text(dumps(obj) + "\n")


# table loading ---------------------------------------------------------------


@dataclass
class Table:
    labels: list
    cells: dict  # label -> list of raw strings
    factors: set = field(default_factory=set)  # columns forced categorical

    @property
    def n(self) -> int:
        return len(self.cells[self.labels[0]])

    def _check(self, label):
        if label not in self.cells:
            raise InvalidParameter(f"unknown column {label!r}")
        return self.cells[label]

    def _missing(self, label):
        raw = self._check(label)
        for i, v in enumerate(raw):
            if v.strip() in MISSING:
                raise MissingValue(f"missing value in column {label!r}", row=i + 2, col=label)
        return raw

    def is_numeric(self, label) -> bool:
        if label in self.factors:
            return False
        for v in self._check(label):
            v = v.strip()
            if v in MISSING:
                continue
            try:
                float(v)
            except ValueError:
                return False
            return True
        return True

    def numeric(self, label) -> np.ndarray:
        raw = self._missing(label)
        out = np.empty(len(raw))
        for i, v in enumerate(raw):
            try:
                out[i] = float(v)
            except ValueError:
                raise ParseError(f"non-numeric value {v!r} in column {label!r}", row=i + 2, col=label) from None
        if not np.all(np.isfinite(out)):
            i = int(np.flatnonzero(~np.isfinite(out))[0])
            raise ParseError(f"non-finite value in column {label!r}", row=i + 2, col=label)
        return out

    def labels_of(self, label) -> np.ndarray:
        return np.array([v.strip() for v in self._missing(label)])

    def numeric_labels(self):
        return [c for c in self.labels if self.is_numeric(c)]


def load_csv(path, factors=()) -> Table:
    """Read a header-plus-rows CSV. Rows must all have the header's width."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ParseError(f"cannot open {path}: {exc}") from exc
    with fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]  # blank lines
    if not rows:
        raise EmptyData(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header) or any(not h for h in header):
        raise ParseError("header labels must be unique and nonempty", row=1)
    body = rows[1:]
    if not body:
        raise EmptyData(f"{path} has a header but no data rows")
    for i, r in enumerate(body):
        if len(r) != len(header):
            col = header[min(len(r), len(header) - 1)]
            raise ParseError(f"expected {len(header)} fields, found {len(r)}", row=i + 2, col=col)
    cells = {h: [r[j] for r in body] for j, h in enumerate(header)}
    return Table(header, cells, set(factors))


# model terms -------------------------------------------------------------------

_SQ = re.compile(r"^(?:sq\((\w[\w.]*)\)|(\w[\w.]*)\^2)$")
_LOG2 = re.compile(r"^log2\((\w[\w.]*)\)$")


def parse_terms(text: str):
    """Split ``x1,sq(x1),log2(x2),x1:x2`` into ``(kind, columns)`` pairs."""
    out = []
    for raw in (t.strip() for t in text.split(",")):
        if not raw:
            continue
        if m := _SQ.match(raw):
            out.append(("square", (m.group(1) or m.group(2),)))
        elif m := _LOG2.match(raw):
            out.append(("log2", (m.group(1),)))
        elif ":" in raw or "*" in raw:
            a, b = re.split(r"[:*]", raw, maxsplit=1)
            out.append(("interaction", (a.strip(), b.strip())))
        else:
            out.append(("plain", (raw,)))
    return out


def _term_label(kind, cols):
    return {"square": "{0}^2", "log2": "log2({0})", "interaction": "{0}:{1}", "plain": "{0}"}[kind].format(*cols)


def _expand(table: Table, col):
    """Numeric column as-is, categorical as reference-coded indicators."""
    if table.is_numeric(col):
        return [col], [table.numeric(col)]
    lab = table.labels_of(col)
    levels = sorted(set(lab))
    if len(levels) < 2:
        raise InvalidParameter(f"categorical column {col!r} has a single level")
    return [f"{col}[{lev}]" for lev in levels[1:]], [(lab == lev).astype(float) for lev in levels[1:]]


def build_design(table: Table, terms, intercept=True):
    """Design matrix and column names for the parsed terms."""
    names, cols = (["(Intercept)"], [np.ones(table.n)]) if intercept else ([], [])
    for kind, args in terms:
        if kind == "plain":
            nm, cs = _expand(table, args[0])
        elif kind == "square":
            x = table.numeric(args[0])
            nm, cs = [_term_label(kind, args)], [x * x]
        elif kind == "log2":
            x = table.numeric(args[0])
            if np.any(x <= 0):
                i = int(np.flatnonzero(x <= 0)[0])
                raise ParseError(f"log2 of a non-positive value in column {args[0]!r}", row=i + 2, col=args[0])
            nm, cs = [_term_label(kind, args)], [np.log2(x)]
        else:
            na, ca = _expand(table, args[0])
            nb, cb = _expand(table, args[1])
            nm = [f"{a}:{b}" for a in na for b in nb]
            cs = [u * v for u in ca for v in cb]
        names.extend(nm)
        cols.extend(cs)
    return np.column_stack(cols), names


@dataclass
class ModelSpec:
    response: str
    fixed_terms: list
    group: str | None = None
    q_grid: list = field(default_factory=lambda: [0.5])


def parse_q(text: str):
    """``0.25,0.5,0.75`` or ``start:step:stop``; strictly increasing in (0, 1)."""
    text = str(text).strip()
    if ":" in text:
        try:
            a, s, b = (float(v) for v in text.split(":"))
        except ValueError as exc:
            raise InvalidParameter(f"bad quantile range {text!r}") from exc
        if not s > 0:
            raise InvalidParameter("quantile step must be positive")
        k = int(math.floor((b - a) / s + 1e-9))
        qs = [round(a + i * s, 12) for i in range(k + 1)]
    else:
        try:
            qs = [float(v) for v in text.split(",") if v.strip()]
        except ValueError as exc:
            raise InvalidParameter(f"bad quantile list {text!r}") from exc
    if not qs:
        raise InvalidParameter("empty quantile grid")
    qs = [check_quantile(q) for q in qs]
    if any(b <= a for a, b in zip(qs, qs[1:])):
        raise InvalidParameter("quantile grid must be strictly increasing")
    return qs


# commands ------------------------------------------------------------------------


def _opts(args) -> QremOptions:
    return QremOptions(epsilon=args.epsilon, max_iter=args.max_iter)


def _model(args, table: Table):
    if not args.response:
        raise InvalidParameter("--response is required")
    terms_text = args.terms
    if terms_text is None:
        skip = {args.response, getattr(args, "group", None)}
        terms_text = ",".join(c for c in table.labels if c not in skip)
    return ModelSpec(args.response, parse_terms(terms_text), getattr(args, "group", None), parse_q(args.q))


def _coef_rows(q, names, beta, se, lo, hi):
    return [
        {"q": q, "term": t, "estimate": float(b), "se": float(s), "se_lo": float(l), "se_hi": float(h)}
        for t, b, s, l, h in zip(names, beta, se, lo, hi)
    ]


def write_coefficients(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["q", "term", "estimate", "se", "se_lo", "se_hi"])
        for r in rows:
            w.writerow([_fmt_float(r["q"]), r["term"]] + [_fmt_float(r[k]) for k in ("estimate", "se", "se_lo", "se_hi")])


def _fit_entry(q, names, fit, extra=None):
    d = {
        "q": q,
        "converged": bool(fit.converged),
        "iterations": int(fit.iterations),
        "coefficients": {t: float(b) for t, b in zip(names, fit.beta)},
    }
    d.update(goodness_of_fit(fit))
    d.update(extra or {})
    return d


def cmd_fit(args, table, out):
    m = _model(args, table)
    y = table.numeric(m.response)
    X, names = build_design(table, m.fixed_terms)
    z = norm.ppf(0.5 + args.level / 2)
    fits, rows = [], []
    for q in m.q_grid:
        fit = fit_qrem(X, y, q, _opts(args))
        try:
            se = asymptotic_cov(fit, X).se
        except QremError as exc:
            log.warning("q=%g: no standard errors (%s)", q, exc)
            se = np.full(len(names), np.nan)
        rows += _coef_rows(q, names, fit.beta, se, fit.beta - z * se, fit.beta + z * se)
        fits.append(_fit_entry(q, names, fit))
    write_coefficients(out / "coefficients.csv", rows)
    return {"model": _model_json(m, names), "fits": fits, "se_method": "asymptotic"}


def cmd_fit_mixed(args, table, out):
    if not args.group:
        raise InvalidParameter("fit-mixed needs --group")
    m = _model(args, table)
    y = table.numeric(m.response)
    X, names = build_design(table, m.fixed_terms)
    spec = MixedSpec.from_groups(X, table.labels_of(m.group))
    rng = RngStream(args.seed)
    fits, rows = [], []
    for i, q in enumerate(m.q_grid):
        fit = fit_eqrem(spec, y, q, _opts(args))
        extra = {
            "K_var": float(fit.K_var),
            "variance_collapsed": bool(fit.variance_collapsed),
            "blup": {str(lab): float(v) for lab, v in zip(spec.labels, fit.v)},
        }
        if args.boot_reps > 0:
            ci = bootstrap_ci(spec, y, q, reps=args.boot_reps, level=args.level, rng=rng.spawn(i),
                              opts=QremOptions(epsilon=args.epsilon, max_iter=args.max_iter), jobs=args.jobs)
            se, lo, hi = ci.se, ci.lower, ci.upper
            extra["bootstrap_failed"] = int(ci.failed)
        else:
            se = lo = hi = np.full(len(names), np.nan)
        rows += _coef_rows(q, names, fit.beta, se, lo, hi)
        fits.append(_fit_entry(q, names, fit, extra))
    write_coefficients(out / "coefficients.csv", rows)
    return {"model": _model_json(m, names), "fits": fits, "se_method": "cluster bootstrap",
            "boot_reps": args.boot_reps}


def _model_json(m: ModelSpec, names):
    return {
        "response": m.response,
        "terms": [_term_label(k, c) for k, c in m.fixed_terms],
        "design_columns": names,
        "group": m.group,
        "q_grid": m.q_grid,
    }


def _base_columns(terms):
    seen = []
    for _, cols in terms:
        for c in cols:
            if c not in seen:
                seen.append(c)
    return seen


def cmd_diagnose(args, table, out):
    m = _model(args, table)
    y = table.numeric(m.response)
    X, names = build_design(table, m.fixed_terms)
    fits = [fit_qrem(X, y, q, _opts(args)) for q in m.q_grid]
    base = _base_columns(m.fixed_terms)
    numeric = [c for c in base if table.is_numeric(c)]
    categorical = [c for c in base if not table.is_numeric(c)]
    report = {"model": _model_json(m, names), "fits": [], "ks_constant": args.ks_const}
    with open(out / "flatqq.csv", "w", newline="") as fq, open(out / "qqpairs.csv", "w", newline="") as fp:
        wq = csv.writer(fq, lineterminator="\n")
        wp = csv.writer(fp, lineterminator="\n")
        wq.writerow(["variable", "q", "xi", "ratio"])
        wp.writerow(["variable", "q", "k", "above", "below"])
        flat = {}
        for c in numeric:
            fq_ = flat_qq(fits, table.numeric(c), L=args.L)
            flat[c] = fq_
            for q, xi, r in fq_.long_rows():
                wq.writerow([c, _fmt_float(q), _fmt_float(xi), _fmt_float(r) if math.isfinite(r) else "NA"])
        for fit in fits:
            sr = sign_residuals(fit)
            k = len(sr.zero)
            entry = _fit_entry(fit.q, names, fit, {
                "above": int(len(sr.above)),
                "below": int(len(sr.below)),
                "interpolated": k,
                "orthogonality_gap": orthogonality_gap(X, sr),
                "ks": {},
                "balance": {},
            })
            for c in numeric:
                x = table.numeric(c)
                try:
                    qa, qb = qq_pairs(x, sr)
                    ks = ks_check(x, sr, args.ks_const)
                except EmptySide as exc:
                    entry["ks"][c] = {"error": str(exc)}
                    continue
                for i, (a, b) in enumerate(zip(qa, qb)):
                    wp.writerow([c, _fmt_float(fit.q), i, _fmt_float(a), _fmt_float(b)])
                entry["ks"][c] = {"statistic": ks.statistic, "bound": ks.bound, "passed": ks.passed}
            for c in categorical:
                try:
                    tab = categorical_balance(table.labels_of(c), sr)
                except SparseLevel as exc:
                    entry["balance"][c] = {"error": str(exc)}
                    continue
                entry["balance"][c] = [
                    {"level": str(b.level), "count": b.count, "share": b.share, "expected": b.expected,
                     "p_value": b.p_value}
                    for b in tab
                ]
            report["fits"].append(entry)
    report["flat_qq"] = {
        c: {
            "band": [0.8, 1.25],
            "cells_outside": int(f.outside().sum()),
            "band_holds": [bool(v) for v in f.band_holds()],
        }
        for c, f in flat.items()
    }
    return report


def _select_opts(args, n):
    return SelectOptions(
        delta=args.delta,
        epsilon=args.epsilon_select,
        init=InitStrategy.parse(args.init),
        randomized_restarts=args.restarts,
        rng=RngStream(args.seed),
        qrem=QremOptions(epsilon=args.epsilon, max_iter=args.max_iter),
    )


def cmd_select(args, table, out):
    if args.graph:
        cols = [t for t in (args.terms.split(",") if args.terms else table.numeric_labels()) if t.strip()]
        data = np.column_stack([table.numeric(c.strip()) for c in cols])
        g = neighborhood_graph(data, [c.strip() for c in cols], parse_q(args.q), _select_opts(args, len(data)),
                               jobs=args.jobs)
        g.write_csv(out / "edges.csv")
        (out / "graph.dot").write_text(g.to_dot())
        return {
            "graph": {
                "nodes": g.nodes,
                "edges": [{"from": a, "to": b, "q": q, "sign": s, "strength": st} for a, b, q, s, st in g.edges],
                "bidirectional": {repr(q): [list(p) for p in g.bidirectional(q)] for q in parse_q(args.q)},
                "failures": [{"node": a, "q": q, "message": msg} for a, q, msg in g.failures],
            }
        }
    m = _model(args, table)
    y = table.numeric(m.response)
    X, names = build_design(table, m.fixed_terms, intercept=False)
    z = norm.ppf(0.5 + args.level / 2)
    rows, sel = [], []
    for q in m.q_grid:
        res = fit_select(y, X, q, _select_opts(args, len(y)))
        st = res.state
        fnames = ["(Intercept)"] + [names[k] for k in res.columns]
        Xd = np.column_stack([np.ones(len(y))] + [X[:, k] for k in res.columns])
        try:
            se = asymptotic_cov(res.fit, Xd).se
        except QremError:
            se = np.full(len(fnames), np.nan)
        rows += _coef_rows(q, fnames, res.fit.beta, se, res.fit.beta - z * se, res.fit.beta + z * se)
        sel.append({
            "q": q,
            "selected": [names[k] for k in st.S],
            "coefficients": {t: float(b) for t, b in zip(fnames, res.fit.beta)},
            "gamma_post": {names[k]: [float(v) for v in st.gamma_post[k]] for k in st.S},
            "loglik_trace": [float(v) for v in st.loglik_trace],
            "converged": bool(st.converged),
            "terminal_sets": [[names[k] for k in s] for s in st.terminal_sets],
            "mixture": {
                "mu": st.params.mu, "sigma_v2": st.params.sigma_v2, "p_L": st.params.p_L,
                "p_0": st.params.p_0, "p_R": st.params.p_R, "sigma_eps2": st.params.sigma_eps2,
            },
        })
    write_coefficients(out / "coefficients.csv", rows)
    return {"model": _model_json(m, names), "selection": sel}


def cmd_simulate(args, table, out):
    from .simlab import generate, get_scenario, load_scenario, run_replications

    s = load_scenario(args.scenario_file) if args.scenario_file else get_scenario(args.scenario)
    rng = RngStream(args.seed)
    if args.emit_data:
        d = generate(s, rng.spawn(10**6))
        with open(out / "data.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            head = [f"x{j + 1}" for j in range(d.X.shape[1])] + ["y"]
            extra = []
            if d.groups is not None:
                head.append("group")
                extra.append([f"g{int(v)}" for v in d.groups])
            if d.times is not None:
                head.append("time")
                extra.append([_fmt_float(v) for v in d.times])
            w.writerow(head)
            for i in range(len(d.y)):
                w.writerow([_fmt_float(v) for v in d.X[i]] + [_fmt_float(d.y[i])] + [e[i] for e in extra])
    if args.reps < 2:
        return {"scenario": s.id, "emitted": bool(args.emit_data)}
    sel = _select_opts(args, s.n) if args.method == "select" else None
    rep = run_replications(s, parse_q(args.q), reps=args.reps, method=args.method, rng=rng,
                           boot_reps=args.boot_reps, select_opts=sel, level=args.level)
    rep.write_csv(out / "replications.csv")
    d = json.loads(rep.to_json())
    d["emitted"] = bool(args.emit_data)
    return {"report": d}


COMMANDS = {
    "fit": cmd_fit,
    "fit-mixed": cmd_fit_mixed,
    "select": cmd_select,
    "diagnose": cmd_diagnose,
    "simulate": cmd_simulate,
}


def _env(name, default, cast=str):
    v = os.environ.get("QREMKIT_" + name.upper().replace("-", "_"))
    if v is None:
        return default
    try:
        return cast(v)
    except ValueError:
        raise SystemExit(f"bad value for QREMKIT_{name.upper()}: {v!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qremkit", description="Quantile regression by EM.")
    sub = p.add_subparsers(dest="command", required=True)

    def opt_float(v):
        return None if v in ("", "none", "auto") else float(v)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help="input CSV with a header row")
    common.add_argument("--response", help="response column")
    common.add_argument("--terms", default=None,
                        help="comma list: col, sq(col), log2(col), a:b (default: all other columns)")
    common.add_argument("--factor", action="append", default=[], help="treat a numeric column as categorical")
    common.add_argument("--q", default=_env("q", "0.5"), help="comma list or start:step:stop")
    common.add_argument("--epsilon", type=opt_float, default=_env("epsilon", None, opt_float))
    common.add_argument("--max-iter", type=int, default=_env("max_iter", 1000, int))
    common.add_argument("--boot-reps", type=int, default=_env("boot_reps", 200, int))
    common.add_argument("--seed", type=int, default=_env("seed", 0, int))
    common.add_argument("--delta", type=float, default=_env("delta", 2.0, float))
    common.add_argument("--init", default=_env("init", "one_at_a_time:20"))
    common.add_argument("--out-dir", default=_env("out_dir", "qremkit-out"))
    common.add_argument("--jobs", type=int, default=_env("jobs", 1, int))
    common.add_argument("--level", type=float, default=_env("level", 0.95, float))
    common.add_argument("-v", "--verbose", action="store_true")

    sub.add_parser("fit", parents=[common], help="fixed-effects fits over a quantile grid")
    fm = sub.add_parser("fit-mixed", parents=[common], help="random-intercept fits with cluster bootstrap")
    fm.add_argument("--group", default=None, help="grouping column")
    d = sub.add_parser("diagnose", parents=[common], help="sign-residual checks and flat Q-Q tables")
    d.add_argument("--L", type=int, default=20, help="number of cut points for the flat Q-Q matrix")
    d.add_argument("--ks-const", type=float, default=1.63)
    s = sub.add_parser("select", parents=[common], help="variable selection or a neighborhood graph")
    s.add_argument("--graph", action="store_true", help="regress each column on the others")
    s.add_argument("--restarts", type=int, default=_env("restarts", 0, int))
    s.add_argument("--epsilon-select", type=opt_float, default=None, help="outer tolerance (default 1e-4 n)")
    sim = sub.add_parser("simulate", parents=[common], help="replicate a simulation scenario")
    sim.add_argument("--scenario", default="2")
    sim.add_argument("--scenario-file", default=None)
    sim.add_argument("--method", choices=["qrem", "eqrem", "select"], default="qrem")
    sim.add_argument("--reps", type=int, default=_env("reps", 50, int))
    sim.add_argument("--emit-data", action="store_true", help="also write one generated dataset to data.csv")
    sim.add_argument("--restarts", type=int, default=0)
    sim.add_argument("--epsilon-select", type=opt_float, default=None)
    return p


def run(argv=None) -> dict:
    """Parse ``argv``, run the command and return the results document."""
    args = build_parser().parse_args(argv)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "simulate":
        table = None
    else:
        if not args.data:
            raise InvalidParameter("--data is required")
        table = load_csv(args.data, factors=args.factor)
    body = COMMANDS[args.command](args, table, out)
    doc = {"schema": SCHEMA, "command": args.command, "seed": args.seed}
    doc.update(body)
    write_json(out / "results.json", doc)
    return doc


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(argv)
    except QremError as exc:
        print(f"qremkit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
