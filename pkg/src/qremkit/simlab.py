"""Simulation scenarios, replication runner and summary metrics.

A scenario is a mean and a scale written as sums of monomials in the true
predictors ``x1, x2, ...``, an error law (normal or lognormal, the latter
with its parameters on the log scale), a predictor law, optional inactive
noise columns and an optional random intercept. Built-in scenarios cover
the fixed-effect table (``"1"`` .. ``"25"``) and the large-P table
(``"L1"`` .. ``"L9"``).
"""

from __future__ import annotations

import csv
import json
import re
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .errors import InvalidScenario, QremError
from .mixed import MixedSpec, bootstrap_ci, fit_eqrem
from .numkit import RngStream
from .qrem import asymptotic_cov, check_quantile, fit_qrem

_TERM = re.compile(r"\s*([+-])?\s*([^+-]+)")
_FACTOR = re.compile(r"^x(\d+)(?:\^(\d+))?$")


def parse_poly(text: str):
    """Parse ``"1 - 3*x1 + 0.2*x1^3 + x1*x2"`` into ``{monomial: coef}``.

    A monomial is a sorted tuple of 0-based column indices; ``()`` is the
    constant.
    """
    s = str(text).replace(" ", "")
    if not s:
        raise InvalidScenario("empty expression")
    s = re.sub(r"(?<=[eE])([+-])", lambda m: "p" if m.group(1) == "+" else "m", s)
    out: dict = {}
    pos = 0
    for m in _TERM.finditer(s):
        if m.start() != pos:
            raise InvalidScenario(f"cannot parse {text!r}")
        pos = m.end()
        sign = -1.0 if m.group(1) == "-" else 1.0
        coef, mono = sign, []
        for f in m.group(2).split("*"):
            f = f.replace("p", "+").replace("m", "-")
            fm = _FACTOR.match(f)
            if fm:
                mono += [int(fm.group(1)) - 1] * int(fm.group(2) or 1)
                continue
            try:
                coef *= float(f)
            except ValueError as exc:
                raise InvalidScenario(f"bad factor {f!r} in {text!r}") from exc
        key = tuple(sorted(mono))
        if key and min(key) < 0:
            raise InvalidScenario("predictors are numbered from x1")
        out[key] = out.get(key, 0.0) + coef
    if pos != len(s):
        raise InvalidScenario(f"cannot parse {text!r}")
    return out


def format_poly(poly) -> str:
    """Inverse of :func:`parse_poly`; coefficients keep full precision."""
    parts = []
    for mono, c in poly.items():
        name = "*".join(f"x{j + 1}" for j in mono)
        num = repr(float(c)).removesuffix(".0")
        if not mono:
            parts.append(num)
        else:
            parts.append(name if c == 1 else f"-{name}" if c == -1 else f"{num}*{name}")
    return " + ".join(parts).replace("+ -", "- ")


def eval_poly(poly, X):
    X = np.asarray(X, dtype=float)
    out = np.zeros(X.shape[0])
    for mono, c in poly.items():
        t = np.full(X.shape[0], c)
        for j in mono:
            t = t * X[:, j]
        out += t
    return out


@dataclass
class Scenario:
    """Generative description of one simulation setting.

    ``predictors`` is ``uniform(a,b)`` for every true column, a ``;``-separated
    list of per-column laws, ``ar1(rho)`` for uniform(0, 1) columns with
    lag-1 correlation ``rho``, or ``time_normal(sd)`` for ``N(t/T, sd^2)``
    at time ``t`` of ``T`` (random-intercept designs only). Columns beyond
    the true ones, up to ``P``, are i.i.d. ``N(0, noise_sd^2)``.
    """

    id: str
    mean: str
    scale: str
    error: str = "normal"
    n: int = 1000
    P: int | None = None
    predictors: str = "uniform(0,1)"
    noise_sd: float = 0.1
    re_sd: float | None = None
    groups: int | None = None
    times: int | None = None
    description: str = ""

    def __post_init__(self):
        self.mean_poly = parse_poly(self.mean)
        self.scale_poly = parse_poly(self.scale)
        if self.error not in ("normal", "lognormal"):
            raise InvalidScenario(f"unknown error law {self.error!r}")
        if self.re_sd is not None:
            if not (self.groups and self.times):
                raise InvalidScenario("a random intercept needs groups and times")
            self.n = int(self.groups) * int(self.times)
        if self.P is not None and self.P < self.n_true:
            raise InvalidScenario("P is smaller than the number of true predictors")
        self._laws()

    @property
    def n_true(self) -> int:
        idx = [j for mono in list(self.mean_poly) + list(self.scale_poly) for j in mono]
        return max(idx) + 1 if idx else 0

    @property
    def n_cols(self) -> int:
        return max(self.P or 0, self.n_true)

    @property
    def true_set(self):
        return sorted({j for mono in list(self.mean_poly) + list(self.scale_poly) for j in mono})

    def _laws(self):
        spec = self.predictors.replace(" ", "")
        m = re.fullmatch(r"ar1\(([^)]+)\)", spec)
        if m:
            return ("ar1", float(m.group(1)))
        m = re.fullmatch(r"time_normal\(([^)]+)\)", spec)
        if m:
            if self.re_sd is None:
                raise InvalidScenario("time_normal predictors need a random intercept")
            return ("time", float(m.group(1)))
        laws = []
        for part in spec.split(";"):
            m = re.fullmatch(r"uniform\(([^,]+),([^)]+)\)", part)
            if not m:
                raise InvalidScenario(f"unknown predictor law {part!r}")
            a, b = float(m.group(1)), float(m.group(2))
            if not a < b:
                raise InvalidScenario("uniform law needs a < b")
            laws.append((a, b))
        if len(laws) not in (1, max(self.n_true, 1)):
            raise InvalidScenario("give one predictor law or one per true column")
        return ("uniform", laws)

    def support(self):
        """Per-column ``(lo, hi)`` of the true predictors, where bounded."""
        kind, arg = self._laws()
        if kind == "uniform":
            return [arg[min(j, len(arg) - 1)] for j in range(self.n_true)]
        if kind == "ar1":
            return [(0.0, 1.0)] * self.n_true
        return None

    def design_terms(self, include_scale=True):
        """Intercept, every true column, then higher mean monomials (and
        scale monomials when ``include_scale``)."""
        terms = [()] + [(j,) for j in range(self.n_true)]
        extra = [m for m in self.mean_poly if len(m) > 1]
        if include_scale:
            extra += [m for m in self.scale_poly if len(m) > 1]
        for m in sorted(set(extra), key=lambda m: (len(m), m)):
            terms.append(m)
        return terms

    def true_quantile_coefs(self, q):
        """Coefficients on :meth:`design_terms` when the q-th quantile is
        linear in them, else ``None``."""
        q = check_quantile(q)
        terms = self.design_terms()
        coef = {t: self.mean_poly.get(t, 0.0) for t in terms}
        z = norm.ppf(q)
        const_scale = all(not m for m in self.scale_poly)
        if self.error == "lognormal":
            if not const_scale:
                return None
            coef[()] += float(np.exp(z * self.scale_poly.get((), 0.0)))
        else:
            if any(len(m) > 1 for m in self.scale_poly):
                return None
            # an affine scale keeps the quantile linear only where it has one sign
            sup = self.support()
            if not const_scale:
                if sup is None:
                    return None
                corners = np.array(np.meshgrid(*[list(s) for s in sup])).reshape(len(sup), -1).T
                vals = eval_poly(self.scale_poly, corners)
                if not (np.all(vals > 0) or np.all(vals < 0)):
                    return None
                sgn = 1.0 if np.all(vals > 0) else -1.0
            else:
                sgn = 1.0 if self.scale_poly.get((), 0.0) >= 0 else -1.0
            for m, c in self.scale_poly.items():
                coef[m] = coef.get(m, 0.0) + z * sgn * c
        return np.array([coef[t] for t in terms])


def design_matrix(X, terms):
    X = np.asarray(X, dtype=float)
    cols = []
    for mono in terms:
        c = np.ones(X.shape[0])
        for j in mono:
            c = c * X[:, j]
        cols.append(c)
    return np.column_stack(cols)


def term_names(terms):
    return ["(Intercept)" if not m else ":".join(f"x{j + 1}" for j in m) for m in terms]


@dataclass
class Dataset:
    X: np.ndarray  # raw predictor columns (true first, then noise)
    y: np.ndarray
    groups: np.ndarray | None = None
    times: np.ndarray | None = None

    def mixed_spec(self, terms):
        return MixedSpec(design_matrix(self.X, terms), self.groups)


def _uniform_ar1(g, n, k, rho):
    # Gaussian copula; for uniform margins Pearson r = (6/pi) asin(r_gauss / 2)
    rg = 2.0 * np.sin(np.pi * rho / 6.0)
    Z = np.empty((n, k))
    Z[:, 0] = g.standard_normal(n)
    for j in range(1, k):
        Z[:, j] = rg * Z[:, j - 1] + np.sqrt(1.0 - rg * rg) * g.standard_normal(n)
    return norm.cdf(Z)


def generate(s: Scenario, rng) -> Dataset:
    """One draw of the scenario; identical streams give identical data."""
    g = rng.generator() if isinstance(rng, RngStream) else RngStream(int(rng or 0)).generator()
    n, k = s.n, s.n_true
    kind, arg = s._laws()
    groups = times = None
    if kind == "uniform":
        X = np.column_stack([g.uniform(*arg[min(j, len(arg) - 1)], n) for j in range(k)]) if k else np.zeros((n, 0))
    elif kind == "ar1":
        X = _uniform_ar1(g, n, k, arg)
    else:
        T = int(s.times)
        times = np.tile(np.arange(1, T + 1), int(s.groups))
        X = np.column_stack([g.normal(times / T, arg) for _ in range(k)]) if k else np.zeros((n, 0))
    if s.n_cols > k:
        X = np.column_stack([X, g.normal(0.0, s.noise_sd, (n, s.n_cols - k))])
    mu = eval_poly(s.mean_poly, X)
    sc = eval_poly(s.scale_poly, X)
    if not np.all(np.isfinite(sc)) or np.any(sc == 0):
        raise InvalidScenario(f"scenario {s.id}: scale expression vanishes or is not finite")
    e = g.standard_normal(n) * np.abs(sc)
    if s.error == "lognormal":
        e = np.exp(e)
    y = mu + e
    if s.re_sd is not None:
        groups = np.repeat(np.arange(int(s.groups)), int(s.times))
        y = y + g.normal(0.0, s.re_sd, int(s.groups))[groups]
    return Dataset(X=X, y=y, groups=groups, times=times)


# built-in scenarios ----------------------------------------------------------

_FIVE = "1 - 3*x1 + 2*x2 + 2*x3 - x4 - 2*x5"


def _builtin():
    S = {}

    def add(id, mean, scale, **kw):
        S[id] = Scenario(id=id, mean=mean, scale=scale, **kw)

    add("1", "3", "0.25", description="intercept only")
    for i, sd in enumerate(np.round(np.arange(0.1, 1.01, 0.1), 1)):
        add(str(2 + i), "5 - x1", f"{sd:g}", description=f"simple linear, sd {sd:g}")
    add("12", "1 - 3*x1 + 2*x2", "0.1", predictors="uniform(0,1);uniform(-3,3)")
    add("13", _FIVE, "0.1", predictors="uniform(-1,1)")
    add("14", "3 + 2*x1", "0.1 + 0.2*x1")
    add("15", "5 + x1", "0.1 + 0.5*x1")
    add("16", "3 + 0.5*x1", "0.5 + 0.7*x1")
    add("17", "1 - 2*x1", "0.1 + 0.2*x1^3")
    add("18", "7 + 3*x1", "1 - 0.5*x1", predictors="uniform(-1,1)")
    add("19", "5", "0.75", error="lognormal", predictors="uniform(-1,1)")
    add("20", "3 - x1", "0.75", error="lognormal", predictors="uniform(-1,1)")
    add("21", _FIVE, "0.75", error="lognormal", predictors="uniform(-1,1)")
    add("22", "2 - 2*x1", "0.5 + 0.5*x1", error="lognormal", predictors="uniform(-1,1)")
    add("23", "6*x1^2 + x1 + 120", "0.2 + x1", predictors="uniform(-5,5)")
    add("24", "4*x1*x2", "0.1 + 0.2*x1", n=10000)
    add("25", "2 + x1", "0.1", re_sd=0.5, groups=100, times=4, predictors="time_normal(0.1)")
    big = dict(n=200, P=500)
    add("L1", "3", "0.1 + x1", **big)
    add("L2", "5 - x1", "0.3", **big)
    add("L3", "5 - x1", "0.1 + x1", **big)
    add("L4", _FIVE, "0.1", **big)
    add("L5", _FIVE, "0.1 + x1", **big)
    add("L6", _FIVE, "0.1 + x1 + 1.3*x2", **big)
    add("L7", _FIVE, "0.75", error="lognormal", **big)
    add("L8", "2 - 2*x1", "0.25 + 0.5*x1", error="lognormal", **big)
    add("L9", " + ".join(f"x{j}" for j in range(1, 21)), "0.1", n=100, P=1000, predictors="ar1(0.95)")
    return S


SCENARIOS = _builtin()


def get_scenario(id, **overrides) -> Scenario:
    key = str(id)
    if key not in SCENARIOS:
        raise InvalidScenario(f"unknown scenario {id!r}")
    s = SCENARIOS[key]
    return replace(s, **overrides) if overrides else replace(s)


_FIELDS = {"id": str, "mean": str, "scale": str, "error": str, "n": int, "P": int, "predictors": str,
           "noise_sd": float, "re_sd": float, "groups": int, "times": int, "description": str}


def load_scenario(path_or_text) -> Scenario:
    """Read ``key = value`` lines (``#`` comments) into a :class:`Scenario`."""
    text = str(path_or_text)
    if "\n" not in text and "=" not in text:
        with open(text) as fh:
            text = fh.read()
    kw = {}
    for i, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidScenario(f"line {i}: expected key = value")
        k, v = (p.strip() for p in line.split("=", 1))
        if k not in _FIELDS:
            raise InvalidScenario(f"line {i}: unknown key {k!r}")
        try:
            kw[k] = _FIELDS[k](v)
        except ValueError as exc:
            raise InvalidScenario(f"line {i}: bad value for {k}") from exc
    for k in ("id", "mean", "scale"):
        if k not in kw:
            raise InvalidScenario(f"missing key {k!r}")
    return Scenario(**kw)


# replications ----------------------------------------------------------------


@dataclass
class ReplicationReport:
    scenario: str
    method: str
    q_grid: list
    reps: int
    terms: list = field(default_factory=list)
    bias: list = field(default_factory=list)  # per q, per term
    emp_sd: list = field(default_factory=list)
    mean_se: list = field(default_factory=list)
    coverage: list = field(default_factory=list)
    tp_hist: list = field(default_factory=list)  # per q: counts of k true found, k = 0..n_true
    fp_hist: list = field(default_factory=list)  # per q: counts of k false found
    failures: list = field(default_factory=list)  # per q
    runtime: float = 0.0
    estimates: list = field(default_factory=list)  # per q: reps x terms (NaN when failed)

    def to_json(self) -> str:
        def clean(o):
            if isinstance(o, float):
                return None if not np.isfinite(o) else o
            if isinstance(o, (list, tuple)):
                return [clean(v) for v in o]
            if isinstance(o, dict):
                return {k: clean(v) for k, v in o.items()}
            return o

        d = asdict(self)
        d.pop("estimates")
        return json.dumps(clean(d), indent=2, sort_keys=True)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if self.method == "select":
                w.writerow(["q", "kind", "k", "count"])
                for q, tp, fp in zip(self.q_grid, self.tp_hist, self.fp_hist):
                    for k, c in enumerate(tp):
                        w.writerow([q, "TP", k, c])
                    for k, c in enumerate(fp):
                        w.writerow([q, "FP", k, c])
                return
            w.writerow(["q", "term", "bias", "emp_sd", "mean_se", "coverage"])
            for i, q in enumerate(self.q_grid):
                for j, t in enumerate(self.terms):
                    w.writerow([q, t, self.bias[i][j], self.emp_sd[i][j], self.mean_se[i][j],
                                self.coverage[i][j]])


def _one_rep(s, q_grid, method, rng, boot_reps, select_opts, terms, level):
    data = generate(s, rng)
    z = norm.ppf(0.5 + level / 2)
    out = []
    for q in q_grid:
        try:
            if method == "qrem":
                Xd = design_matrix(data.X, terms)
                fit = fit_qrem(Xd, data.y, q)
                se = asymptotic_cov(fit, Xd).se
                out.append((fit.beta, se, fit.beta - z * se, fit.beta + z * se, None))
            elif method == "eqrem":
                spec = data.mixed_spec(terms)
                fit = fit_eqrem(spec, data.y, q)
                ci = bootstrap_ci(spec, data.y, q, reps=boot_reps, level=level, rng=rng.spawn(int(q * 1e6)))
                out.append((fit.beta, ci.se, ci.lower, ci.upper, None))
            else:
                from .select import fit_select

                res = fit_select(data.y, data.X, q, select_opts)
                out.append((None, None, None, None, set(res.S)))
        except QremError:
            out.append(None)
    return out


def run_replications(s: Scenario, q_grid, reps=50, method="qrem", rng=None, boot_reps=200,
                     select_opts=None, level=0.95, include_scale_terms=True, progress=None):
    """Generate, fit and summarize ``reps`` draws of a scenario.

    ``method`` is ``qrem`` (asymptotic se, Wald intervals), ``eqrem``
    (cluster-bootstrap percentile intervals) or ``select`` (TP/FP counts
    against the scenario's true predictors). Replicate ``r`` uses
    ``rng.spawn(r)``, so the report does not depend on scheduling.
    """
    if reps < 2:
        raise InvalidScenario("need at least 2 replicates")
    if method not in ("qrem", "eqrem", "select"):
        raise InvalidScenario(f"unknown method {method!r}")
    rng = rng if isinstance(rng, RngStream) else RngStream(int(rng or 0))
    q_grid = [check_quantile(q) for q in q_grid]
    terms = s.design_terms(include_scale_terms)
    t0 = time.perf_counter()
    results = []
    for r in range(reps):
        results.append(_one_rep(s, q_grid, method, rng.spawn(r), boot_reps, select_opts, terms, level))
        if progress:
            progress(r)
    rep = ReplicationReport(scenario=s.id, method=method, q_grid=list(q_grid), reps=reps,
                            terms=term_names(terms))
    true = set(s.true_set)
    for i, q in enumerate(q_grid):
        rows = [res[i] for res in results]
        ok = [r for r in rows if r is not None]
        rep.failures.append(reps - len(ok))
        if method == "select":
            tp = np.zeros(len(true) + 1, int)
            fp = np.zeros(0, int)
            for r in ok:
                k_tp = len(r[4] & true)
                k_fp = len(r[4] - true)
                tp[k_tp] += 1
                if k_fp >= len(fp):
                    fp = np.concatenate([fp, np.zeros(k_fp + 1 - len(fp), int)])
                fp[k_fp] += 1
            rep.tp_hist.append(tp.tolist())
            rep.fp_hist.append(fp.tolist())
            continue
        est = np.array([r[0] for r in ok]) if ok else np.zeros((0, len(terms)))
        se = np.array([r[1] for r in ok]) if ok else np.zeros((0, len(terms)))
        lo = np.array([r[2] for r in ok]) if ok else np.zeros((0, len(terms)))
        hi = np.array([r[3] for r in ok]) if ok else np.zeros((0, len(terms)))
        truth = s.true_quantile_coefs(q)
        full = np.full((reps, len(terms)), np.nan)
        full[[j for j, r in enumerate(rows) if r is not None]] = est
        rep.estimates.append(full.tolist())
        nan = [float("nan")] * len(terms)
        rep.emp_sd.append(est.std(0, ddof=1).tolist() if len(est) > 1 else nan)
        rep.mean_se.append(se.mean(0).tolist() if len(se) else nan)
        if truth is None:
            rep.bias.append(nan)
            rep.coverage.append(nan)
        else:
            rep.bias.append((est.mean(0) - truth).tolist() if len(est) else nan)
            rep.coverage.append(((lo <= truth) & (truth <= hi)).mean(0).tolist() if len(est) else nan)
    rep.runtime = time.perf_counter() - t0
    return rep
