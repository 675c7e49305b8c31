import math

import numpy as np
import pytest
from scipy import integrate

from bayescv.errors import DomainError
from bayescv.models import (
    ProductRegression,
    RegularNormal,
    TanhNetwork,
    kl_to_truth,
    log_density,
    log_density_ratio,
    make_model,
    make_product_regression,
    make_regular_normal,
    make_tanh_network,
    sample_truth,
)

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def test_regular_normal_log_density_at_mode():
    model = RegularNormal.create()
    assert log_density(model, [0.0], [0.0]) == pytest.approx(-0.9189385332046727, abs=1e-15)


def test_tanh_zero_weights_density():
    model = TanhNetwork.create(H=3, sigma=0.1)
    x = np.array([0.3, -1.2, 2.0, 0.5, -0.1, 0.7])
    sig2 = 0.01
    s = -1.5 * math.log(2 * math.pi * 4.0) - np.sum(x[:3] ** 2) / 8.0
    want = s - 1.5 * math.log(2 * math.pi * sig2) - np.sum(x[3:] ** 2) / (2 * sig2)
    assert log_density(model, x, np.zeros(18)) == pytest.approx(want, rel=1e-13)


def test_product_regression_singular_fiber():
    model = ProductRegression.create()
    x = [0.7, -0.3]
    base = log_density(model, x, [0.0, 0.0])
    for b in (-1.5, 0.2, 1.9):
        assert log_density(model, x, [0.0, b]) == base


def test_density_ratio_regular_normal():
    # f = log p0 - log p = ((x - w)^2 - (x - w0)^2) / 2 with x=1, w=1, w0=0
    model, truth = make_regular_normal()
    assert log_density_ratio(model, truth, [1.0], [1.0]) == pytest.approx(-0.5, abs=1e-14)
    assert log_density_ratio(model, truth, [1.0], [-1.0]) == pytest.approx(1.5, abs=1e-14)


def test_density_ratio_zero_at_optimum():
    rng = np.random.default_rng(0)
    for model, truth in (make_regular_normal(), make_product_regression(), make_tanh_network()):
        X = truth.draw(20, rng)
        w0 = np.asarray(truth.w0)
        f = truth.log_p0(X) - model.log_density(X, w0[None, :])[0]
        np.testing.assert_allclose(f, 0.0, atol=1e-12)


def test_tanh_density_ratio_is_squared_residual_difference():
    model, truth = make_tanh_network()
    rng = np.random.default_rng(3)
    X = truth.draw(5, rng)
    w = rng.normal(scale=0.5, size=model.d)
    R = model.regression_mean(X[:, :3], w[None, :])[0]
    R0 = truth.generator.regression_mean(X[:, :3], np.asarray(truth.w_true)[None, :])[0]
    y = X[:, 3:]
    want = (np.sum((y - R) ** 2, axis=1) - np.sum((y - R0) ** 2, axis=1)) / (2 * 0.01)
    got = [log_density_ratio(model, truth, X[i], w) for i in range(5)]
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)


def test_tanh_embedded_truth_network_matches():
    model, truth = make_tanh_network(H=3, H0=1)
    X = np.random.default_rng(1).normal(size=(50, 3))
    big = model.regression_mean(X, np.asarray(truth.w0)[None, :])
    small = truth.generator.regression_mean(X, np.asarray(truth.w_true)[None, :])
    assert np.array_equal(big, small)


def test_domain_error_carries_index():
    model = ProductRegression.create(bound=2.0)
    with pytest.raises(DomainError) as info:
        log_density(model, [0.0, 0.0], [0.5, 3.0])
    assert info.value.index == 1


def test_kl_at_optimum_is_zero():
    model, truth = make_regular_normal()
    k, se = kl_to_truth(model, truth, [0.0], 1000, 1)
    assert k == 0.0 and se == 0.0


def test_kl_regular_normal():
    # quadrature oracle of E[(x-1)^2/2 - x^2/2] over x ~ N(0, 1)
    oracle, _ = integrate.quad(lambda x: math.exp(-x * x / 2) / math.sqrt(2 * math.pi)
                               * ((x - 1) ** 2 - x * x) / 2, -np.inf, np.inf)
    model, truth = make_regular_normal()
    k, se = kl_to_truth(model, truth, [1.0], 20_000, 2)
    assert abs(k - oracle) <= 3 * se


def test_kl_product_regression():
    oracle, _ = integrate.quad(lambda x: math.exp(-x * x / 2) / math.sqrt(2 * math.pi) * x * x / 2,
                               -np.inf, np.inf)
    assert oracle == pytest.approx(0.5, abs=1e-12)
    model, truth = make_product_regression()
    k, se = kl_to_truth(model, truth, [1.0, 1.0], 20_000, 3)
    assert abs(k - oracle) <= 3 * se


def test_kl_nonnegative_up_to_noise():
    model, truth = make_product_regression()
    rng = np.random.default_rng(4)
    for k in range(10):
        w = rng.uniform(-2, 2, size=2)
        est, se = kl_to_truth(model, truth, w, 2000, k)
        assert est >= -3 * se


def test_sample_truth_deterministic_and_ln():
    _, truth = make_product_regression()
    a = sample_truth(truth, 30, 9)
    b = sample_truth(truth, 30, 9)
    assert np.array_equal(a.samples, b.samples)
    one = sample_truth(truth, 1, 5)
    assert len(one) == 1
    assert one.Ln == -truth.log_p0(one.samples)[0]
    assert a.Ln == -np.mean(truth.log_p0(a.samples))


def test_tanh_input_marginal():
    _, truth = make_tanh_network()
    X = sample_truth(truth, 10_000, 0).samples[:, :3]
    se_mean = 2.0 / math.sqrt(10_000)
    assert np.all(np.abs(X.mean(axis=0)) < 4 * se_mean)
    # sample variance of N(0, 4): sd of the estimate is 4*sqrt(2/n)
    assert np.all(np.abs(X.var(axis=0) - 4.0) < 4 * 4.0 * math.sqrt(2 / 10_000))


def test_regular_normal_density_normalised():
    model = RegularNormal.create()
    val, _ = integrate.quad(lambda x: math.exp(log_density(model, [x], [0.7])), -np.inf, np.inf)
    assert val == pytest.approx(1.0, abs=1e-3)


def test_product_regression_density_normalised():
    model = ProductRegression.create()
    f = lambda y, x: math.exp(log_density(model, [x, y], [1.2, -0.8]))  # noqa: E731
    val, _ = integrate.dblquad(f, -12, 12, -20, 20)
    assert val == pytest.approx(1.0, abs=1e-3)


def test_tanh_density_normalised_monte_carlo():
    # importance sampling with outputs drawn around R(x, w) at a wider scale than sigma
    model = TanhNetwork.create(H=3, sigma=0.1)
    rng = np.random.default_rng(5)
    w = rng.normal(scale=0.5, size=model.d)
    x = rng.normal(scale=2.0, size=(200_000, 3))
    R = model.regression_mean(x, w[None, :])[0]
    tau = 0.15
    y = R + tau * rng.standard_normal(R.shape)
    logq = (model.log_input_density(x) - 1.5 * math.log(2 * math.pi * tau**2)
            - 0.5 * np.sum((y - R) ** 2, axis=1) / tau**2)
    ratio = np.exp(model.log_density(np.hstack([x, y]), w[None, :])[0] - logq)
    se = np.std(ratio) / math.sqrt(ratio.size)
    assert abs(np.mean(ratio) - 1.0) < max(4 * se, 1e-3)


@pytest.mark.parametrize("model", [RegularNormal.create(prior_scale=10.0, bound=40.0),
                                   RegularNormal.create(prior_scale=1.0, bound=1.5)])
def test_log_prior_normalised_1d(model):
    lo, hi = model.lo[0], model.hi[0]
    val, _ = integrate.quad(lambda w: math.exp(model.log_prior(np.array([[w]]))[0]), lo, hi,
                            points=[0.0], limit=200)
    assert val == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("scale", [None, 1.5])
def test_log_prior_normalised_2d(scale):
    model = ProductRegression.create(bound=2.0, prior_scale=scale)
    val, _ = integrate.dblquad(lambda b, a: math.exp(model.log_prior(np.array([[a, b]]))[0]),
                               -2, 2, -2, 2)
    assert val == pytest.approx(1.0, abs=1e-8)


def test_log_prior_outside_box():
    model = ProductRegression.create(bound=2.0)
    assert model.log_prior(np.array([[2.5, 0.0]]))[0] == -np.inf


def test_lambda_analytic_positive():
    assert make_regular_normal()[1].lambda_analytic == pytest.approx(0.5)
    assert make_product_regression()[1].lambda_analytic == pytest.approx(0.5)
    assert make_tanh_network()[1].lambda_analytic is None


def test_entropy_matches_monte_carlo():
    for model, truth in (make_regular_normal(), make_product_regression(), make_tanh_network()):
        X = sample_truth(truth, 100_000, 11).samples
        lp = truth.log_p0(X)
        se = np.std(lp) / math.sqrt(lp.size)
        assert abs(-np.mean(lp) - truth.L0) < 4 * se


def test_registry():
    model, truth = make_model("tanh_network", H=2, H0=1)
    assert model.d == 12 and truth.generator.d == 6
    with pytest.raises(ValueError, match="unknown model"):
        make_model("nope")
    with pytest.raises(ValueError):
        make_tanh_network(H=1, H0=2)


def test_quadrature_rule_integrates_moments():
    _, truth = make_product_regression(a_true=1.0, b_true=0.5)
    X, logw = truth.quadrature_rule(10)
    w = np.exp(logw)
    assert np.sum(w) == pytest.approx(1.0, abs=1e-14)
    # E[y^2] = (ab)^2 E[x^2] + 1
    assert np.sum(w * X[:, 1] ** 2) == pytest.approx(1.25, abs=1e-12)
