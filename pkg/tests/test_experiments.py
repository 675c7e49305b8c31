import json
import math

import numpy as np
import pytest

from bayescv.criteria import CriteriaReport
from bayescv.cumulants import CumulantSet
from bayescv.errors import NumericalFailure
from bayescv.experiments import (
    ExperimentPlan,
    correlation_matrix,
    correlations_csv,
    estimate_invariants,
    estimate_nu_prime,
    fit_rate,
    reports_csv,
    run_experiment,
    summary_csv,
    theorem_residuals,
    write_outputs,
)
from bayescv.models import make_regular_normal, sample_truth
from bayescv.oracles import conjugate_normal
from bayescv.posterior import QuadratureConfig

from .conftest import point_mass

SMALL = ExperimentPlan(model="product_regression", n=30, replicates=6, backend=QuadratureConfig(61),
                       rule_order=12, master_seed=3)


def _report(n=10, beta=1.0, bg=0.01, bt=-0.01, cv=0.02, v_n=0.5, waic=1.0, btl=0.9):
    cum = CumulantSet(-1.0, v_n / n, 0.0, 0.0, v_n, np.zeros((n, 4)))
    return CriteriaReport(n=n, beta=beta, btl=btl, gtl=1.0, waic=waic, cv2=waic, dic1=1.0, dic2=1.0,
                          cumulants=cum, bg=bg, bt=bt, cv=cv, bgl=1.0)


@pytest.fixture(scope="module")
def small_run():
    return run_experiment(SMALL)


def test_plan_validation():
    with pytest.raises(ValueError):
        ExperimentPlan(model="regular_normal", n=10, replicates=0)
    with pytest.raises(ValueError):
        ExperimentPlan(model="regular_normal", n=10, replicates=2, n_sweep=(10, 10))
    with pytest.raises(ValueError):
        ExperimentPlan(model="regular_normal", n=10, replicates=2, beta=1.0, nu_prime_h=0.6)


def test_run_is_deterministic(small_run):
    summary, reports = small_run
    again, reports2 = run_experiment(SMALL)
    assert reports_csv(reports) == reports_csv(reports2)
    assert summary_csv(summary) == summary_csv(again)
    assert summary.survivors == 6 and summary.failures == []


def test_parallel_matches_serial(small_run):
    _, reports = small_run
    _, par = run_experiment(SMALL, workers=3)
    assert reports_csv(reports) == reports_csv(par)


def test_seed_changes_results(small_run):
    _, reports = small_run
    from dataclasses import replace
    _, other = run_experiment(replace(SMALL, master_seed=4))
    assert reports_csv(reports) != reports_csv(other)


def test_correlation_matrix_properties(small_run):
    _, reports = small_run
    C = correlation_matrix(reports)
    V = C.values.filled(np.nan)
    assert np.allclose(V, V.T, atol=1e-12, equal_nan=True)
    assert np.allclose(np.diag(V), 1.0, atol=1e-12)
    assert C["cv", "waic"] > 0.9


def test_correlation_undefined_for_constant_columns():
    reps = [_report() for _ in range(4)]
    C = correlation_matrix(reps)
    assert C.values.mask.all()
    assert C["bg", "cv"] is None
    assert "undefined" in correlations_csv(C)


def test_correlation_needs_three_reports():
    with pytest.raises(ValueError):
        correlation_matrix([_report(), _report()])


def test_invariant_estimators_formulae():
    reps = [_report(bg=0.01 * k, bt=-0.005 * k, cv=0.02 + 0.001 * k, v_n=0.5 + 0.1 * k) for k in range(5)]
    inv = estimate_invariants(reps, 1.0, n_boot=200)
    bg = 0.01 * np.arange(5)
    bt = -0.005 * np.arange(5)
    cv = 0.02 + 0.001 * np.arange(5)
    v = 0.5 + 0.1 * np.arange(5)
    assert inv.lambda_hat == pytest.approx(0.5 * np.mean(10 * (bg + bt) + v))
    assert inv.lambda_alt == pytest.approx(0.5 * 10 * np.mean(bg + cv))
    assert inv.nu_hat == pytest.approx(0.5 * np.mean(v))
    assert min(inv.lambda_se, inv.lambda_alt_se, inv.nu_se) >= 0


def test_invariants_refuse_few_reports():
    with pytest.raises(ValueError):
        estimate_invariants([_report(), _report()], 1.0)


def test_theorem_residuals_point_mass_zero():
    # for a point mass at beta=1, CV2 and WAIC both reduce to BtL
    from bayescv.criteria import evaluate
    model, truth = make_regular_normal()
    ds = sample_truth(truth, 8, 0)
    ens = point_mass(model.log_density(ds.samples, np.array([[0.3]]))[0], w=(0.3,))
    rep = evaluate(ens, model, ds)
    res = theorem_residuals([rep])
    assert res["cv2_minus_waic"][0] == 0.0


def test_fit_rate():
    ns = np.array([10, 20, 40, 80])
    assert fit_rate(ns, 3.0 * ns**-2.0) == pytest.approx(-2.0)


def _nu_prime_oracle(datasets, beta, h):
    # central difference of nu(beta) = (beta/2) V(n) from the conjugate closed form
    d = []
    for ds in datasets:
        x = ds.samples.ravel()
        nu = [0.5 * b * conjugate_normal(x, b)["v_n"] for b in (beta + h, beta - h)]
        d.append((nu[0] - nu[1]) / (2 * h))
    return float(np.mean(d))


def test_nu_prime_on_regular_model():
    model, truth = make_regular_normal()
    n = 100
    datasets = [sample_truth(truth, n, (1, k)) for k in range(30)]
    est = {}
    for h in (0.1, 0.05, 0.025):
        val, se = estimate_nu_prime(model, datasets, 1.0, h, QuadratureConfig(2001))
        assert val == pytest.approx(_nu_prime_oracle(datasets, 1.0, h), abs=1e-9)
        assert se >= 0
        est[h] = val
    # vanishes at rate 1/n: nu_n(beta) = 1/2 + 1/(4 beta n) + ..., so n nu'(1) is near -1/4
    assert n * est[0.05] == pytest.approx(-0.25, abs=0.02)
    # step dependence is pure O(h^2) truncation
    ratio = (est[0.1] - est[0.05]) / (est[0.05] - est[0.025])
    assert 3.0 < ratio < 5.0
    with pytest.raises(ValueError):
        estimate_nu_prime(model, datasets, 1.0, 0.6, QuadratureConfig(11))


def test_failed_replicates_are_recorded(monkeypatch):
    import bayescv.experiments as ex

    real = ex.run_replicate

    def flaky(plan, r):
        if r == 1:
            raise NumericalFailure("synthetic")
        return real(plan, r)

    monkeypatch.setattr(ex, "run_replicate", flaky)
    summary, reports = run_experiment(SMALL)
    assert summary.survivors == 5 and len(reports) == 5
    assert summary.failures[0][0] == 1

    monkeypatch.setattr(ex, "run_replicate", lambda plan, r: (_ for _ in ()).throw(NumericalFailure("x")))
    with pytest.raises(NumericalFailure):
        run_experiment(SMALL)


def test_paired_and_nu_prime_options():
    from dataclasses import replace
    plan = replace(SMALL, paired_n_minus_1=True, nu_prime_h=0.1)
    summary, _ = run_experiment(plan)
    assert set(summary.paired) == {"mean_cv", "mean_bg_n_minus_1", "se_cv", "se_bg_n_minus_1"}
    assert summary.invariants.nu_prime_se >= 0


def test_write_outputs(tmp_path, small_run):
    summary, reports = small_run
    names = write_outputs(tmp_path, summary, reports, {"seed": 3})
    assert set(names) == {"reports.csv", "summary.csv", "correlations.csv", "invariants.json", "manifest.json"}
    inv = json.loads((tmp_path / "invariants.json").read_text())
    assert math.isfinite(inv["lambda_hat"]) and inv["survivors"] == 6
    rows = (tmp_path / "reports.csv").read_text().splitlines()
    assert len(rows) == 7
