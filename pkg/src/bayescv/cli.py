"""Command-line front end.

    bayescv --config run.yaml [--out DIR] [--seed S] [--workers K] [--mode M]
    bayescv --mode oracle-check [--out DIR]

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 oracle-check threshold failure.  Messages go to stderr; data go to files
in the output directory only.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .config import MODES, RunConfig, parse_config, serialize
from .criteria import evaluate
from .errors import ConfigError, NumericalFailure
from .experiments import (
    _fmt,
    git_describe,
    reports_csv,
    run_experiment,
    run_sweep,
    write_outputs,
)
from .models import make_regular_normal, sample_truth
from .oracles import conjugate_normal
from .posterior import QuadratureConfig, build_posterior

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_ORACLE = 0, 2, 3, 4
OUT_ROOT_ENV = "BAYESCV_OUT_ROOT"

logger = logging.getLogger("bayescv")


def build_parser():
    p = argparse.ArgumentParser(
        prog="bayescv",
        description="Bayesian cross-validation and WAIC experiments on singular and regular models.",
        epilog=f"Exit codes: 0 ok, 2 config error, 3 numerical failure, 4 oracle-check failure. "
               f"Default output root: ${OUT_ROOT_ENV} or ./bayescv-out.",
    )
    p.add_argument("--config", help="YAML run configuration (schema version 1)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes for replicates (default: available cores)")
    p.add_argument("--mode", choices=MODES, help="run mode (overrides the config)")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def _out_dir(args, cfg, mode):
    if args.out:
        return args.out
    if cfg is not None and cfg.output:
        return cfg.output
    return os.path.join(os.environ.get(OUT_ROOT_ENV, "bayescv-out"), mode)


def _write(out_dir, name, text):
    with open(os.path.join(out_dir, name), "w", newline="") as fh:
        fh.write(text)


def _manifest(cfg):
    return {
        "bayescv_version": __version__,
        "git_describe": git_describe(),
        "config": cfg.to_dict(),
        "master_seed": cfg.master_seed,
        "seed_scheme": "replicate r uses (master_seed, r, stream); streams 0 data, 1 posterior, 2 test points",
    }


# -- oracle check ------------------------------------------------------------------

ORACLE_N = 20
ORACLE_GRID = 2001
ORACLE_RTOL = 1e-5
ORACLE_CV_ATOL = 1e-8


def oracle_check(seed=0):
    """Quadrature criteria against conjugate closed forms; returns table rows."""
    model, truth = make_regular_normal()
    ds = sample_truth(truth, ORACLE_N, seed)
    rows = []
    backend = QuadratureConfig(ORACLE_GRID)
    for beta in (1.0, 0.5):
        ens = build_posterior(model, ds, beta, backend)
        rep = evaluate(ens, model, ds, None, cv1_backend=backend if beta == 1.0 else None)
        exact = conjugate_normal(ds.samples.ravel(), beta, model.prior_scale, model.hi[0])
        pairs = [("btl", rep.btl, exact["btl"]), ("gtl", rep.gtl, exact["gtl"]),
                 ("waic", rep.waic, exact["waic"]), ("cv2", rep.cv2, exact["cv"]),
                 ("free_energy", -ens.log_evidence, exact["free_energy"])]
        for name, got, want in pairs:
            err = abs(got - want) / abs(want)
            rows.append((f"{name}@beta={beta:g}", got, want, err, ORACLE_RTOL, err <= ORACLE_RTOL))
        if rep.cv1 is not None:
            err = abs(rep.cv1 - rep.cv2)
            rows.append((f"cv1-cv2@beta={beta:g}", rep.cv1, rep.cv2, err, ORACLE_CV_ATOL,
                         err <= ORACLE_CV_ATOL))
    return rows


def _oracle_table(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("check", "computed", "reference", "error", "tolerance", "status"))
    for name, got, want, err, tol, ok in rows:
        w.writerow((name, _fmt(got), _fmt(want), _fmt(err), _fmt(tol), "PASS" if ok else "FAIL"))
    return buf.getvalue()


def _run_oracle(out_dir, seed):
    t0 = time.perf_counter()
    rows = oracle_check(seed)
    _write(out_dir, "oracle_check.csv", _oracle_table(rows))
    for name, got, want, err, tol, ok in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<22} err={err:.2e} tol={tol:.0e}", file=sys.stderr)
    print(f"oracle-check finished in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return EXIT_OK if all(r[-1] for r in rows) else EXIT_ORACLE


# -- modes ---------------------------------------------------------------------------

def _run_evaluate(cfg, out_dir):
    plan = cfg.plan()
    model, truth = plan.build()
    ds = sample_truth(truth, cfg.n, (cfg.master_seed, 0, 0))
    ens = build_posterior(model, ds, cfg.beta, plan.backend_for(0, 1))
    rep = evaluate(ens, model, ds, truth, test_size=cfg.test_size, seed=(cfg.master_seed, 0, 2),
                   rule_order=cfg.rule_order,
                   cv1_backend=plan.backend_for(0, 1) if cfg.cv1 else None)
    _write(out_dir, "reports.csv", reports_csv([rep]))
    _write(out_dir, "report.json", rep.to_json() + "\n")
    print(f"evaluate: n={rep.n} beta={rep.beta:g} waic={rep.waic:.6f} cv2={rep.cv2:.6f}", file=sys.stderr)


def _run_experiment(cfg, out_dir, workers, manifest):
    summary, reports = run_experiment(cfg.plan(), workers)
    write_outputs(out_dir, summary, reports, manifest)
    if summary.failures:
        print(f"experiment: {len(summary.failures)} of {summary.replicates} replicates failed",
              file=sys.stderr)
    inv = summary.invariants
    if inv is not None:
        print(f"experiment: lambda_hat={inv.lambda_hat:.4f} +- {inv.lambda_se:.4f}, "
              f"nu_hat={inv.nu_hat:.4f} +- {inv.nu_se:.4f}", file=sys.stderr)


def _run_sweep(cfg, out_dir, workers, manifest):
    rows, slope, per_n = run_sweep(cfg.plan(), workers)
    for n, (summary, reports) in per_n.items():
        write_outputs(os.path.join(out_dir, f"n{n}"), summary, reports, manifest)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = ("n", "median_abs_cv2_minus_waic", "mean_y4", "survivors")
    w.writerow(keys)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in keys])
    _write(out_dir, "sweep.csv", buf.getvalue())
    _write(out_dir, "sweep.json", json.dumps({"beta": cfg.beta, "slope": slope}, indent=2, sort_keys=True))
    print(f"sweep: slope of median|cv2 - waic| vs n = {slope:.3f}", file=sys.stderr)


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    cfg = None
    try:
        if args.config:
            cfg = parse_config(args.config)
        elif args.mode != "oracle-check":
            raise ConfigError("--config is required unless --mode oracle-check")
        if cfg is None:
            cfg = RunConfig(mode="oracle-check")
        if args.mode:
            cfg = replace(cfg, mode=args.mode)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be in [0, 2**64)")
            cfg = replace(cfg, master_seed=args.seed)
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        out_dir = _out_dir(args, cfg, cfg.mode)
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {out_dir!r}: {exc.strerror}") from None
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    workers = args.workers or os.cpu_count() or 1
    try:
        if cfg.mode == "oracle-check":
            return _run_oracle(out_dir, cfg.master_seed)
        _write(out_dir, "config.yaml", serialize(cfg))
        manifest = _manifest(cfg)
        if cfg.mode == "evaluate":
            _run_evaluate(cfg, out_dir)
            _write(out_dir, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        elif cfg.mode == "experiment":
            _run_experiment(cfg, out_dir, workers, manifest)
        else:
            _run_sweep(cfg, out_dir, workers, manifest)
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
