"""Replicated-dataset experiments: criteria over many training sets,
summary statistics, correlation tables, and estimates of the learning
coefficient ``lambda`` and singular fluctuation ``nu``.

Every random stream is keyed by ``(master_seed, replicate, purpose)`` so a
plan reproduces bit for bit regardless of worker count or completion order.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .criteria import REPORT_COLUMNS, bayes_generalization_loss, evaluate
from .cumulants import cumulants
from .errors import NumericalFailure
from .models import make_model, sample_truth
from .posterior import McmcConfig, QuadratureConfig, build_posterior
from .seeding import make_rng

logger = logging.getLogger(__name__)

TABLE_KEYS = ("bg", "bt", "cv", "waic", "dic1", "dic2", "bg+cv")
# CriteriaReport accessors for each table column; losses are shifted by Ln
_TABLE_ACCESS = {
    "bg": "bg", "bt": "bt", "cv": "cv", "waic": "waic-ln",
    "dic1": "dic1-ln", "dic2": "dic2-ln", "bg+cv": "bg+cv",
}
SUMMARY_KEYS = TABLE_KEYS + ("se", "cv1", "btl", "gtl", "y1", "y2", "y3", "y4", "v_n", "cv2-waic")

# stream tags for make_rng / seed tuples
_DATA, _POSTERIOR, _TEST, _NU_PLUS, _NU_MINUS, _PAIRED = range(6)


@dataclass(frozen=True)
class ExperimentPlan:
    """Protocol for ``replicates`` independent training sets of size ``n``."""

    model: str
    n: int
    replicates: int
    beta: float = 1.0
    backend: object = field(default_factory=QuadratureConfig)
    model_params: dict = field(default_factory=dict)
    test_size: int = 10_000
    rule_order: int | None = None
    n_sweep: tuple | None = None
    master_seed: int = 0
    cv1: bool = False
    paired_n_minus_1: bool = False
    nu_prime_h: float | None = None

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.n_sweep is not None:
            s = list(self.n_sweep)
            if any(b <= a for a, b in zip(s, s[1:])):
                raise ValueError("n_sweep must be strictly increasing")
        if self.nu_prime_h is not None and not 0 < self.nu_prime_h <= self.beta / 2:
            raise ValueError("nu_prime_h must lie in (0, beta/2]")

    def build(self):
        return make_model(self.model, **self.model_params)

    def backend_for(self, r, tag):
        if isinstance(self.backend, McmcConfig):
            return replace(self.backend, seed=(self.master_seed, r, tag))
        return self.backend


@dataclass(frozen=True)
class InvariantEstimate:
    """Estimates of ``lambda`` (two routes), ``nu(beta)`` and ``nu'(beta)`` with standard errors."""

    lambda_hat: float
    lambda_se: float
    lambda_alt: float
    lambda_alt_se: float
    nu_hat: float
    nu_se: float
    nu_prime_hat: float | None = None
    nu_prime_se: float | None = None

    def lambda_routes_agree(self, k=3.0):
        return abs(self.lambda_hat - self.lambda_alt) <= k * math.hypot(self.lambda_se, self.lambda_alt_se)


@dataclass(frozen=True)
class CorrelationMatrix:
    """Pearson correlations; entries with a zero-variance column are masked."""

    labels: tuple
    values: np.ma.MaskedArray

    def __getitem__(self, pair):
        a, b = pair
        v = self.values[self.labels.index(a), self.labels.index(b)]
        return None if v is np.ma.masked else float(v)


@dataclass
class ExperimentSummary:
    n: int
    beta: float
    replicates: int
    failures: list
    avr: dict
    std: dict
    correlations: CorrelationMatrix | None
    invariants: InvariantEstimate | None
    residuals: dict
    paired: dict | None = None

    @property
    def survivors(self):
        return self.replicates - len(self.failures)


# -- per-replicate work ---------------------------------------------------------

def run_replicate(plan, r):
    """Dataset, posterior and report for replicate ``r`` (module-level so it pickles)."""
    model, truth = plan.build()
    seed = plan.master_seed
    ds = sample_truth(truth, plan.n, (seed, r, _DATA))
    ens = build_posterior(model, ds, plan.beta, plan.backend_for(r, _POSTERIOR))
    cv1_backend = plan.backend_for(r, _POSTERIOR) if plan.cv1 else None
    rep = evaluate(ens, model, ds, truth, test_size=plan.test_size, seed=(seed, r, _TEST),
                   rule_order=plan.rule_order, cv1_backend=cv1_backend)
    out = {"report": rep}
    if plan.nu_prime_h is not None:
        h = plan.nu_prime_h
        vs = []
        for b, tag in ((plan.beta + h, _NU_PLUS), (plan.beta - h, _NU_MINUS)):
            vs.append(cumulants(build_posterior(model, ds, b, plan.backend_for(r, tag))).v_n)
        out["v_plus"], out["v_minus"] = vs
    if plan.paired_n_minus_1:
        short = ds.head(plan.n - 1)
        ens_s = build_posterior(model, short, plan.beta, plan.backend_for(r, _PAIRED))
        g = bayes_generalization_loss(ens_s, model, truth, plan.test_size, (seed, r, _TEST), plan.rule_order)
        out["bg_n_minus_1"] = g["bg"]
    return out


def _safe_replicate(args):
    plan, r = args
    try:
        return r, run_replicate(plan, r), None
    except NumericalFailure as exc:
        logger.warning("replicate %d failed: %s", r, exc)
        return r, None, str(exc)


def _map(func, items, workers):
    if workers is None or workers <= 1:
        return [func(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def run_experiment(plan, workers=1):
    """Run all replicates of ``plan`` and summarise.

    Returns ``(ExperimentSummary, reports)``.  Replicates raising
    :class:`NumericalFailure` are recorded and excluded; if none survive the
    failure is re-raised.
    """
    results = _map(_safe_replicate, [(plan, r) for r in range(plan.replicates)], workers)
    results.sort(key=lambda t: t[0])
    failures = [(r, msg) for r, out, msg in results if out is None]
    outs = [out for _, out, _ in results if out is not None]
    if not outs:
        raise NumericalFailure(f"all {plan.replicates} replicates failed; first: {failures[0][1]}")
    reports = [o["report"] for o in outs]
    summary = summarize(reports, plan.beta, failures=failures, replicates=plan.replicates,
                        seed=plan.master_seed)
    if plan.nu_prime_h is not None:
        vp = np.array([o["v_plus"] for o in outs])
        vm = np.array([o["v_minus"] for o in outs])
        val, se = _nu_prime_from(vp, vm, plan.beta, plan.nu_prime_h)
        if summary.invariants is not None:
            summary.invariants = replace(summary.invariants, nu_prime_hat=val, nu_prime_se=se)
    if plan.paired_n_minus_1:
        b1 = np.array([o["bg_n_minus_1"] for o in outs], dtype=float)
        cv = np.array([r.cv for r in reports], dtype=float)
        summary.paired = {
            "mean_cv": float(cv.mean()), "mean_bg_n_minus_1": float(b1.mean()),
            "se_cv": _se(cv), "se_bg_n_minus_1": _se(b1),
        }
    return summary, reports


def _se(x):
    x = np.asarray(x, dtype=float)
    return float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else float("nan")


# -- estimators -------------------------------------------------------------------

def _column(reports, key):
    vals = [r.get(_TABLE_ACCESS.get(key, key)) if key != "cv2-waic" else r.cv2 - r.waic for r in reports]
    if any(v is None for v in vals):
        return None
    return np.asarray(vals, dtype=float)


def _bootstrap_se(values, stat, n_boot, rng):
    idx = rng.integers(0, values.shape[0], size=(n_boot, values.shape[0]))
    return float(np.std([stat(values[i]) for i in idx], ddof=1))


def estimate_invariants(reports, beta, n_boot=1000, seed=0):
    """``lambda``, its cross-validation counterpart, and ``nu(beta)`` from replicate reports.

    ``lambda_hat = (beta/2) mean[n(bg+bt) + V]``,
    ``lambda_alt = (beta n/2) mean[bg + cv - (beta-1) V/n]``,
    ``nu_hat = (beta/2) mean[V]``; standard errors by bootstrap over replicates.
    """
    if len(reports) < 3:
        raise ValueError("need at least 3 reports to estimate invariants")
    ns = {r.n for r in reports}
    if len(ns) != 1:
        raise ValueError("reports must share one n")
    n = ns.pop()
    bg = _column(reports, "bg")
    bt = _column(reports, "bt")
    cv = _column(reports, "cv")
    if bg is None or bt is None or cv is None:
        raise ValueError("reports need bg, bt and cv (truth and Ln attached)")
    v = np.array([r.v_n for r in reports])
    lam = 0.5 * beta * (n * (bg + bt) + v)
    alt = 0.5 * beta * n * (bg + cv - (beta - 1.0) * v / n)
    nu = 0.5 * beta * v
    rng = make_rng(seed, 99)
    return InvariantEstimate(
        float(lam.mean()), _bootstrap_se(lam, np.mean, n_boot, rng),
        float(alt.mean()), _bootstrap_se(alt, np.mean, n_boot, rng),
        float(nu.mean()), _bootstrap_se(nu, np.mean, n_boot, rng),
    )


def _nu_prime_from(v_plus, v_minus, beta, h):
    d = (0.5 * (beta + h) * v_plus - 0.5 * (beta - h) * v_minus) / (2.0 * h)
    return float(d.mean()), _se(d)


def estimate_nu_prime(model, datasets, beta, h, backend):
    """Central difference ``[nu(beta+h) - nu(beta-h)] / 2h`` on fixed datasets.

    Returns ``(estimate, stderr)``; the stderr comes from the per-dataset
    spread of the paired differences.
    """
    if not 0 < h <= beta / 2:
        raise ValueError("h must lie in (0, beta/2]")
    vp, vm = [], []
    for k, ds in enumerate(datasets):
        for b, acc, tag in ((beta + h, vp, _NU_PLUS), (beta - h, vm, _NU_MINUS)):
            bk = backend.with_seed(k, tag) if isinstance(backend, McmcConfig) else backend
            acc.append(cumulants(build_posterior(model, ds, b, bk)).v_n)
    return _nu_prime_from(np.array(vp), np.array(vm), beta, h)


def correlation_matrix(reports, keys=TABLE_KEYS):
    """Pearson correlation over replicates; zero-variance columns are masked, not NaN."""
    if len(reports) < 3:
        raise ValueError("need at least 3 reports")
    cols, labels = [], []
    for k in keys:
        c = _column(reports, k)
        if c is not None:
            cols.append(c)
            labels.append(k)
    X = np.array(cols)
    Xc = X - X.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(Xc**2, axis=1))
    scale = np.max(np.abs(X), axis=1) + 1e-300
    degenerate = norms <= 1e-12 * scale * math.sqrt(X.shape[1])
    safe = np.where(degenerate, 1.0, norms)
    C = (Xc @ Xc.T) / np.outer(safe, safe)
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 1.0)
    mask = degenerate[:, None] | degenerate[None, :]
    return CorrelationMatrix(tuple(labels), np.ma.MaskedArray(C, mask=mask))


def theorem_residuals(reports, lam=None):
    """Per-replicate residuals of the CV/WAIC and ``Bg + Cv`` relations.

    ``cv2 - waic`` always; with ``lam``,
    ``bg + cv - 2 lam/(beta n) - (beta - 1) V/n`` as well.
    """
    out = {"cv2_minus_waic": np.array([r.cv2 - r.waic for r in reports])}
    d = out["cv2_minus_waic"]
    out["median_abs_cv2_minus_waic"] = float(np.median(np.abs(d)))
    if lam is not None:
        res = []
        for r in reports:
            if r.bg is None or r.cv is None:
                break
            res.append(r.bg + r.cv - 2.0 * lam / (r.beta * r.n) - (r.beta - 1.0) * r.v_n / r.n)
        else:
            out["bg_cv_residual"] = np.array(res)
            out["mean_bg_cv_residual"] = float(np.mean(res))
    return out


def fit_rate(ns, values):
    """Least-squares slope of ``log values`` against ``log n``."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def summarize(reports, beta, failures=(), replicates=None, seed=0):
    avr, std = {}, {}
    for k in SUMMARY_KEYS:
        c = _column(reports, k)
        if c is not None:
            avr[k] = float(np.mean(c))
            std[k] = float(np.std(c, ddof=1)) if c.size > 1 else 0.0
    corr = correlation_matrix(reports) if len(reports) >= 3 else None
    inv = None
    if len(reports) >= 3 and all(r.bg is not None and r.bt is not None for r in reports):
        inv = estimate_invariants(reports, beta, seed=seed)
    res = theorem_residuals(reports, inv.lambda_hat if inv else None)
    return ExperimentSummary(
        n=reports[0].n, beta=beta, replicates=replicates or len(reports), failures=list(failures),
        avr=avr, std=std, correlations=corr, invariants=inv, residuals=res,
    )


def run_sweep(plan, workers=1):
    """Run ``plan`` at each ``n`` in ``plan.n_sweep``.

    Returns ``(rows, slope, per_n)`` where ``rows`` hold the median
    ``|cv2 - waic|`` per ``n`` and ``slope`` is its fitted log-log rate.
    """
    ns = list(plan.n_sweep or (25, 50, 100, 200, 400))
    rows, per_n = [], {}
    for n in ns:
        sub = replace(plan, n=n, n_sweep=None, master_seed=plan.master_seed * 100_003 + n)
        summary, reports = run_experiment(sub, workers)
        per_n[n] = (summary, reports)
        rows.append({"n": n, "median_abs_cv2_minus_waic": summary.residuals["median_abs_cv2_minus_waic"],
                     "mean_y4": float(np.mean([r.y4 for r in reports])),
                     "survivors": summary.survivors})
    slope = fit_rate(ns, [r["median_abs_cv2_minus_waic"] for r in rows])
    return rows, slope, per_n


# -- output files -------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def reports_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("replicate",) + REPORT_COLUMNS)
    for k, r in enumerate(reports):
        w.writerow([k] + [_fmt(v) for v in r.as_row()])
    return buf.getvalue()


def summary_csv(summary):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = [k for k in SUMMARY_KEYS if k in summary.avr]
    w.writerow(["stat"] + keys)
    w.writerow(["AVR"] + [_fmt(summary.avr[k]) for k in keys])
    w.writerow(["STD"] + [_fmt(summary.std[k]) for k in keys])
    return buf.getvalue()


def correlations_csv(corr):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(corr.labels))
    for i, a in enumerate(corr.labels):
        row = []
        for j in range(len(corr.labels)):
            v = corr.values[i, j]
            row.append("undefined" if v is np.ma.masked else _fmt(v))
        w.writerow([a] + row)
    return buf.getvalue()


def invariants_json(summary):
    inv = summary.invariants
    out = {"n": summary.n, "beta": summary.beta, "survivors": summary.survivors,
           "failures": summary.failures}
    if inv is not None:
        out.update(asdict(inv))
        out["lambda_routes_agree"] = inv.lambda_routes_agree()
    for k, v in summary.residuals.items():
        if not isinstance(v, np.ndarray):
            out[k] = v
    if summary.paired:
        out["paired_n_minus_1"] = summary.paired
    return json.dumps(out, indent=2, sort_keys=True)


def git_describe():
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=os.path.dirname(__file__), timeout=10)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_outputs(out_dir, summary, reports, manifest):
    """Write ``reports.csv``, ``summary.csv``, ``correlations.csv``, ``invariants.json``, ``manifest.json``."""
    os.makedirs(out_dir, exist_ok=True)
    files = {
        "reports.csv": reports_csv(reports),
        "summary.csv": summary_csv(summary),
        "invariants.json": invariants_json(summary),
        "manifest.json": json.dumps(manifest, indent=2, sort_keys=True, default=str),
    }
    if summary.correlations is not None:
        files["correlations.csv"] = correlations_csv(summary.correlations)
    for name, text in files.items():
        with open(os.path.join(out_dir, name), "w", newline="") as fh:
            fh.write(text)
    return sorted(files)
