"""Bayesian evaluation criteria computed from a posterior ensemble.

Losses (``btl``, ``bgl``, ``gtl``, ``cv1``, ``cv2``, ``waic``, ``dic1``,
``dic2``) are per-sample averages of negative log densities.  Errors
subtract the empirical (``Ln``) or expected (``L0``) log loss of the true
density: ``bt = btl - Ln``, ``cv = cv2 - Ln``, ``bg = bgl - L0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .cumulants import CumulantSet, cumulants, generating_function
from .posterior import (
    QuadratureConfig,
    build_posterior,
    make_rng,
    refit_loo_posterior,
)

# elements of the (M x chunk) log-density block evaluated at once
_BLOCK = 2_000_000


class MonteCarloEstimate(NamedTuple):
    value: float
    stderr: float


def bayes_training_loss(ens, dataset=None):
    """``BtL = -(1/n) sum_i log E_w[p(X_i|w)]``, computed as ``-F(1)``."""
    return -generating_function(ens, 1.0)


def gibbs_training_loss(ens, dataset=None):
    """``GtL = -E_w[(1/n) sum_i log p(X_i|w)] = -Y1``."""
    return -cumulants(ens).y1


def waic(ens, dataset=None, cum=None):
    """``WAIC = BtL + (beta/n) V(n)``."""
    cum = cumulants(ens) if cum is None else cum
    return bayes_training_loss(ens) + (ens.beta / ens.n) * cum.v_n


def cv_pointwise(ens):
    """Per-sample importance-sampling LOO losses and their importance ESS."""
    lnw = ens.log_norm_weights[:, None]
    L = ens.loglik
    loo = -ens.beta * L + lnw
    den = logsumexp(loo, axis=0)
    num = logsumexp(loo + L, axis=0)
    n_eff = np.exp(2.0 * den - logsumexp(2.0 * loo, axis=0))
    return -(num - den), n_eff


def cv_importance(ens, dataset=None):
    """CV2: ``-(1/n) sum_i log(E_w[p^(1-beta)] / E_w[p^(-beta)])``.

    Equal to ``F(-beta) - F(1-beta)`` up to rounding.
    """
    lnw = ens.log_norm_weights[:, None]
    num = logsumexp((1.0 - ens.beta) * ens.loglik + lnw, axis=0)
    den = logsumexp(-ens.beta * ens.loglik + lnw, axis=0)
    return float(-np.mean(num - den))


def cv_refit(model, dataset, beta, backend):
    """CV1: leave-one-out loss with every LOO posterior rebuilt from scratch."""
    if dataset.n < 2:
        raise ValueError("cv_refit needs n >= 2")
    losses = np.empty(dataset.n)
    for i in range(dataset.n):
        ens_i = refit_loo_posterior(model, dataset, i, beta, backend)
        li = model.log_density(dataset.samples[i : i + 1], ens_i.draws)[:, 0]
        losses[i] = -logsumexp(li + ens_i.log_norm_weights)
    return float(np.mean(losses))


def dic1(ens, model, dataset=None):
    """Plug-in DIC: ``BtL + (2/n) sum_i {-E_w[log p(X_i|w)] + log p(X_i|E_w[w])}``.

    Returns ``(value, outside_box)``; the posterior mean is used even when it
    falls outside the box, which only constrains sampling.
    """
    w_bar = ens.weights @ ens.draws
    outside = not bool(model.in_domain(w_bar))
    X = dataset.samples if dataset is not None else None
    if X is None:
        raise ValueError("dic1 needs the dataset")
    plug = model.log_density(X, w_bar[None, :])[0]
    penalty = 2.0 * np.mean(-(ens.weights @ ens.loglik) + plug)
    return bayes_training_loss(ens) + float(penalty), outside


def dic2(ens, dataset=None):
    """``BtL + (2/n) Var_w[sum_i log p(X_i|w)]``."""
    s = ens.loglik.sum(axis=1)
    w = ens.weights
    var = float(w @ (s - w @ s) ** 2)
    return bayes_training_loss(ens) + 2.0 * var / ens.n


def _test_points(truth, test_size, seed, rule_order):
    if rule_order is not None:
        rule = truth.quadrature_rule(rule_order)
        if rule is not None:
            X, logw = rule
            return X, np.exp(logw), True
    rng = make_rng(seed, 7)
    X = np.asarray(truth.draw(test_size, rng), dtype=float).reshape(test_size, -1)
    return X, np.full(test_size, 1.0 / test_size), False


def _weighted_mean_se(values, wts, exact):
    mean = float(wts @ values)
    if exact or values.size < 2:
        return mean, 0.0
    return mean, float(np.std(values, ddof=1) / math.sqrt(values.size))


def _log_predictive(ens, model, X):
    chunk = max(1, _BLOCK // max(ens.M, 1))
    out = np.empty(X.shape[0])
    lnw = ens.log_norm_weights[:, None]
    for s in range(0, X.shape[0], chunk):
        L = model.log_density(X[s : s + chunk], ens.draws)
        out[s : s + chunk] = logsumexp(L + lnw, axis=0)
    return out


def bayes_generalization_loss(ens, model, truth, test_size=10_000, seed=0, rule_order=None):
    """Estimate ``BgL = -E_X[log p*(X)]`` and ``Bg = BgL - L0``.

    Uses fresh test points from the truth, or a deterministic tensor rule
    when ``rule_order`` is given and the truth provides one.  When ``L0`` is
    known the error is estimated from the paired difference
    ``log p0(X) - log p*(X)``, whose variance is far smaller than that of
    ``-log p*(X)`` alone; ``BgL`` is then ``L0 + Bg``.

    Returns
    -------
    dict
        ``bgl``, ``bg`` (``None`` without ``L0``) and ``stderr``.
    """
    if test_size < 1:
        raise ValueError("test_size must be >= 1")
    X, wts, exact = _test_points(truth, test_size, seed, rule_order)
    logp = _log_predictive(ens, model, X)
    if truth.L0 is not None:
        bg, se = _weighted_mean_se(truth.log_p0(X) - logp, wts, exact)
        return {"bgl": truth.L0 + bg, "bg": bg, "stderr": se}
    bgl, se = _weighted_mean_se(-logp, wts, exact)
    return {"bgl": bgl, "bg": None, "stderr": se}


def square_error(ens, model, truth, test_size=10_000, seed=0, rule_order=None):
    """``SE = (1/2 sigma^2) E_X ||R0(X) - E_w[R(X, w)]||^2`` for regression models.

    Returns ``(value, stderr)``.
    """
    if not hasattr(model, "regression_mean") or not hasattr(truth.generator, "regression_mean"):
        raise NotImplementedError(f"{model.name} has no regression structure")
    X, wts, exact = _test_points(truth, test_size, seed, rule_order)
    k = model.sample_dim // 2
    Xin = X[:, :k]
    R0 = truth.generator.regression_mean(Xin, np.asarray(truth.w_true)[None, :])[0]
    chunk = max(1, _BLOCK // max(ens.M, 1))
    w = ens.weights
    Rbar = np.empty_like(R0)
    for s in range(0, Xin.shape[0], chunk):
        Rbar[s : s + chunk] = np.einsum("m,mnk->nk", w, model.regression_mean(Xin[s : s + chunk], ens.draws))
    vals = np.sum((R0 - Rbar) ** 2, axis=1) / (2.0 * model.sigma**2)
    return MonteCarloEstimate(*_weighted_mean_se(vals, wts, exact))


# -- thermodynamic integration -------------------------------------------------

def default_beta_grid(nodes=21, split=0.1, first=1e-4):
    """Geometric nodes on ``[first, split]`` followed by linear nodes up to 1."""
    n_geo = nodes // 2 + 1
    geo = np.geomspace(first, split, n_geo)
    lin = np.linspace(split, 1.0, nodes - n_geo + 1)[1:]
    return np.concatenate([geo, lin])


class FreeEnergyResult(NamedTuple):
    value: float
    betas: np.ndarray
    integrand: np.ndarray
    non_monotone: list


def free_energy(model, dataset, beta_grid=None, backend=None):
    """``F(1) = -log marginal likelihood`` by thermodynamic integration.

    Integrates ``dF/dbeta = n * GtL(beta)`` with the trapezoid rule over
    ensembles built at each grid node; a ``beta = 0`` node (the prior) is
    prepended when the grid does not start there.
    """
    if dataset.n == 0:
        return FreeEnergyResult(0.0, np.zeros(1), np.zeros(1), [])
    betas = default_beta_grid() if beta_grid is None else np.asarray(beta_grid, dtype=float)
    if np.any(np.diff(betas) <= 0):
        raise ValueError("beta grid must be strictly increasing")
    if betas[0] > 0.01:
        raise ValueError("beta grid must start at or below 0.01")
    if not math.isclose(betas[-1], 1.0):
        raise ValueError("beta grid must end at 1")
    if betas[0] > 0:
        betas = np.concatenate([[0.0], betas])
    backend = QuadratureConfig() if backend is None else backend
    integrand = np.empty(betas.size)
    for k, b in enumerate(betas):
        ens = build_posterior(model, dataset, float(b), backend)
        integrand[k] = dataset.n * gibbs_training_loss(ens)
    non_mono = [int(k) for k in np.flatnonzero(np.diff(integrand) > 0)]
    value = float(np.sum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(betas)))
    return FreeEnergyResult(value, betas, integrand, non_mono)


def dic2_derivative_check(model, dataset, beta, backend, h=0.05):
    """Compare DIC2 with ``BtL - 2 dGtL/dbeta`` by central difference in beta.

    Returns a dict with the direct value, the finite-difference value and
    their difference.
    """
    ens = build_posterior(model, dataset, beta, backend)
    direct = dic2(ens)
    g_plus = gibbs_training_loss(build_posterior(model, dataset, beta + h, backend))
    g_minus = gibbs_training_loss(build_posterior(model, dataset, beta - h, backend))
    fd = bayes_training_loss(ens) - 2.0 * (g_plus - g_minus) / (2.0 * h)
    return {"dic2": direct, "finite_difference": fd, "residual": direct - fd}


# -- report --------------------------------------------------------------------

REPORT_COLUMNS = (
    "n", "beta", "btl", "bgl", "gtl", "waic", "cv1", "cv2", "dic1", "dic2", "se",
    "bg", "bt", "cv", "y1", "y2", "y3", "y4", "v_n", "min_neff", "acc_rate",
)


@dataclass
class CriteriaReport:
    """All criteria for one dataset; optional entries are ``None``."""

    n: int
    beta: float
    btl: float
    gtl: float
    waic: float
    cv2: float
    dic1: float
    dic2: float
    cumulants: CumulantSet
    bgl: float | None = None
    cv1: float | None = None
    se: float | None = None
    bg: float | None = None
    bt: float | None = None
    cv: float | None = None
    min_neff: float | None = None
    acc_rate: float | None = None
    bgl_stderr: float | None = None
    se_stderr: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def y1(self):
        return self.cumulants.y1

    @property
    def y2(self):
        return self.cumulants.y2

    @property
    def y3(self):
        return self.cumulants.y3

    @property
    def y4(self):
        return self.cumulants.y4

    @property
    def v_n(self):
        return self.cumulants.v_n

    def get(self, key):
        if key == "bg+cv":
            return None if self.bg is None or self.cv is None else self.bg + self.cv
        if key in ("dic1-ln", "dic2-ln", "waic-ln"):
            base = getattr(self, key[:-3])
            return None if self.bt is None else base - (self.btl - self.bt)
        return getattr(self, key)

    def as_row(self):
        return [self.get(c) for c in REPORT_COLUMNS]

    def to_json(self):
        out = {c: self.get(c) for c in REPORT_COLUMNS}
        out["bgl_stderr"] = self.bgl_stderr
        out["se_stderr"] = self.se_stderr
        out["diagnostics"] = self.diagnostics
        return json.dumps(out, sort_keys=True, default=float)


def evaluate(ens, model, dataset, truth=None, *, test_size=10_000, seed=0,
             rule_order=None, cv1_backend=None, with_se=None):
    """Assemble a :class:`CriteriaReport` for one dataset and ensemble.

    Generalization quantities (``bgl``, ``bg``, ``se``) need ``truth``; the
    empirical errors need ``dataset.Ln``.  ``cv1_backend`` triggers the
    (costly) refit leave-one-out loss.
    """
    cum = cumulants(ens, dataset)
    btl = bayes_training_loss(ens)
    loss, n_eff = cv_pointwise(ens)
    cv2 = float(np.mean(loss))
    d1, d1_out = dic1(ens, model, dataset)
    rep = CriteriaReport(
        n=dataset.n, beta=ens.beta, btl=btl, gtl=-cum.y1,
        waic=btl + (ens.beta / ens.n) * cum.v_n, cv2=cv2,
        dic1=d1, dic2=dic2(ens), cumulants=cum,
        min_neff=float(n_eff.min()),
    )
    rates = ens.diagnostics.get("acceptance_rates")
    if rates:
        rep.acc_rate = float(np.mean(rates))
    rep.diagnostics = {"dic1_mean_outside_box": d1_out, "warnings": list(ens.diagnostics.get("warnings", []))}
    Ln = dataset.Ln
    if Ln is not None:
        rep.bt = btl - Ln
        rep.cv = cv2 - Ln
    if truth is not None:
        g = bayes_generalization_loss(ens, model, truth, test_size, seed, rule_order)
        rep.bgl, rep.bg, rep.bgl_stderr = g["bgl"], g["bg"], g["stderr"]
        if with_se is None:
            with_se = hasattr(model, "regression_mean")
        if with_se:
            se = square_error(ens, model, truth, test_size, seed, rule_order)
            rep.se, rep.se_stderr = se.value, se.stderr
    if cv1_backend is not None:
        rep.cv1 = cv_refit(model, dataset, ens.beta, cv1_backend)
    return rep
