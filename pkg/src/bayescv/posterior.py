"""Tempered posterior ensembles: Metropolis sampling, grid quadrature, and
weighted expectations including importance-reweighted leave-one-out.

A :class:`PosteriorEnsemble` is a finite weighted set of parameter draws
standing in for the posterior ``prod_i p(X_i|w)^beta phi(w)``.  All weight
arithmetic is done in log space.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .errors import NumericalFailure
from .seeding import make_rng

logger = logging.getLogger(__name__)

ENSEMBLE_FORMAT_VERSION = 1


class DiagnosticWarning(UserWarning):
    """Non-fatal sampler or importance-sampling diagnostic."""


@dataclass(frozen=True)
class McmcConfig:
    """Random-walk Metropolis protocol; the same config always reproduces the same draws."""

    chains: int = 4
    burn_in_steps: int = 10_000
    thin: int = 10
    draws_per_chain: int = 500
    proposal_scale: float = 0.005
    seed: object = 0
    init_scale: float | None = None

    def __post_init__(self):
        for name in ("chains", "burn_in_steps", "thin", "draws_per_chain"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"McmcConfig.{name} must be >= 1")
        if not self.proposal_scale > 0:
            raise ValueError("McmcConfig.proposal_scale must be > 0")

    def with_seed(self, *keys):
        base = self.seed if isinstance(self.seed, (list, tuple)) else (self.seed,)
        return replace(self, seed=tuple(base) + tuple(int(k) for k in keys))

    def config_hash(self):
        return _hash(asdict(self))


@dataclass(frozen=True)
class QuadratureConfig:
    """Tensor midpoint grid over the model box (only for ``d <= 2``)."""

    grid_points_per_dim: int = 201

    def config_hash(self):
        return _hash(asdict(self))


def _hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class PosteriorEnsemble:
    """Weighted parameter draws for the posterior at inverse temperature ``beta``.

    Attributes
    ----------
    draws : ndarray, shape (M, d)
    log_weights : ndarray, shape (M,)
        Unnormalised.  For quadrature ensembles these include the prior and
        cell volume, so ``-logsumexp(log_weights)`` is the free energy.
    beta : float
    provenance : {"mcmc", "quadrature"}
    loglik : ndarray, shape (M, n)
        Cached ``log p(X_i | w_m)``.
    diagnostics : dict
        Acceptance rates and attached warnings.
    """

    draws: np.ndarray
    log_weights: np.ndarray
    beta: float
    provenance: str
    loglik: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    config_hash: str = ""

    def __post_init__(self):
        if self.draws.shape[0] != self.log_weights.shape[0] or self.draws.shape[0] != self.loglik.shape[0]:
            raise ValueError("draws, log_weights and loglik disagree on the number of draws")
        if not np.isfinite(logsumexp(self.log_weights)):
            raise NumericalFailure("log-sum-exp of ensemble log weights is not finite")

    @property
    def M(self):
        return int(self.draws.shape[0])

    @property
    def n(self):
        return int(self.loglik.shape[1])

    @property
    def log_norm_weights(self):
        return self.log_weights - logsumexp(self.log_weights)

    @property
    def weights(self):
        return np.exp(self.log_norm_weights)

    @property
    def log_evidence(self):
        """``log int prod p^beta phi dw``; meaningful for quadrature ensembles only."""
        return float(logsumexp(self.log_weights))

    @classmethod
    def from_draws(cls, model, dataset, draws, beta, log_weights=None, provenance="mcmc",
                   diagnostics=None, config_hash=""):
        draws = np.atleast_2d(np.asarray(draws, dtype=float))
        if log_weights is None:
            log_weights = np.zeros(draws.shape[0])
        loglik = model.log_density(dataset.samples, draws) if dataset.n else np.zeros((draws.shape[0], 0))
        return cls(draws, np.asarray(log_weights, dtype=float), float(beta), provenance, loglik,
                   dict(diagnostics or {}), config_hash)


# -- backends ----------------------------------------------------------------

def _chain(model, X, beta, cfg, chain):
    rng = make_rng(cfg.seed, chain)
    d = model.d
    if cfg.init_scale is None:
        w = model.sample_prior(1, rng)[0]
    else:
        lo, hi = model.bounds
        w = np.clip(cfg.init_scale * rng.standard_normal(d), lo, hi)

    def target(v):
        lp = model.log_prior(v[None, :])[0]
        if X.shape[0] == 0:
            return lp
        return beta * model.log_likelihood_sum(X, v) + lp

    lt = target(w)
    if not np.isfinite(lt):
        raise NumericalFailure(f"non-finite log target {lt} at initial parameter {w.tolist()}")

    lo, hi = model.bounds
    total = cfg.burn_in_steps + cfg.draws_per_chain * cfg.thin
    out = np.empty((cfg.draws_per_chain, d))
    accepted = 0
    kept = 0
    block = 4096
    for start in range(0, total, block):
        m = min(block, total - start)
        steps = cfg.proposal_scale * rng.standard_normal((m, d))
        logu = np.log(rng.random(m))
        for j in range(m):
            t = start + j
            prop = w + steps[j]
            if np.all((prop >= lo) & (prop <= hi)):
                lp = target(prop)
                if logu[j] < lp - lt:
                    w, lt = prop, lp
                    if t >= cfg.burn_in_steps:
                        accepted += 1
            if t >= cfg.burn_in_steps and (t - cfg.burn_in_steps + 1) % cfg.thin == 0:
                out[kept] = w
                kept += 1
    rate = accepted / (cfg.draws_per_chain * cfg.thin)
    return out, rate


def metropolis_sample(model, dataset, beta, cfg):
    """Sample the ``beta``-tempered posterior by random-walk Metropolis.

    Each chain starts from an independent prior draw, runs ``burn_in_steps``
    discarded steps, then keeps every ``thin``-th state.  Proposals leaving
    the box are rejected.  Chains are pooled by concatenation into a
    uniform-weight ensemble.
    """
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    X = dataset.samples
    draws, rates = [], []
    for c in range(cfg.chains):
        out, rate = _chain(model, X, float(beta), cfg, c)
        draws.append(out)
        rates.append(rate)
    diag = {"acceptance_rates": rates, "warnings": []}
    for c, r in enumerate(rates):
        if r < 0.01 or r > 0.99:
            msg = f"chain {c}: acceptance rate {r:.4f} outside [0.01, 0.99]"
            diag["warnings"].append(msg)
            warnings.warn(msg, DiagnosticWarning, stacklevel=2)
    return PosteriorEnsemble.from_draws(
        model, dataset, np.vstack(draws), beta, provenance="mcmc",
        diagnostics=diag, config_hash=cfg.config_hash(),
    )


def grid_axes(model, grid_points_per_dim):
    lo, hi = model.bounds
    axes = []
    for j in range(model.d):
        edges = np.linspace(lo[j], hi[j], grid_points_per_dim + 1)
        axes.append(0.5 * (edges[:-1] + edges[1:]))
    log_vol = float(np.sum(np.log((hi - lo) / grid_points_per_dim)))
    return axes, log_vol


def quadrature_posterior(model, dataset, beta, grid_points_per_dim):
    """Dense midpoint-grid posterior for models with ``d <= 2``.

    ``log_weights = beta * sum_i log p(X_i|w) + log phi(w) + log(cell volume)``.
    """
    if model.d > 2:
        raise NotImplementedError(f"quadrature backend supports d <= 2, got d = {model.d}")
    if grid_points_per_dim < 1:
        raise ValueError("grid_points_per_dim must be >= 1")
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    axes, log_vol = grid_axes(model, grid_points_per_dim)
    mesh = np.meshgrid(*axes, indexing="ij")
    W = np.column_stack([m.ravel() for m in mesh])
    ens = PosteriorEnsemble.from_draws(model, dataset, W, beta, provenance="quadrature",
                                       log_weights=np.zeros(W.shape[0]),
                                       config_hash=QuadratureConfig(grid_points_per_dim).config_hash())
    lw = model.log_prior(W) + log_vol
    if dataset.n:
        lw = lw + beta * ens.loglik.sum(axis=1)
    return replace(ens, log_weights=lw)


def build_posterior(model, dataset, beta, backend):
    """Dispatch to the quadrature or Metropolis backend by config type."""
    if isinstance(backend, QuadratureConfig):
        return quadrature_posterior(model, dataset, beta, backend.grid_points_per_dim)
    if isinstance(backend, McmcConfig):
        return metropolis_sample(model, dataset, beta, backend)
    raise TypeError(f"unknown posterior backend {backend!r}")


# -- expectations --------------------------------------------------------------

def _eval_g(ens, g):
    vals = np.asarray(g(ens.draws) if callable(g) else g, dtype=float)
    if vals.shape[0] != ens.M:
        raise ValueError(f"g returned {vals.shape[0]} values for {ens.M} draws")
    bad = ~np.isfinite(vals)
    if bad.any():
        m = int(np.flatnonzero(bad.reshape(ens.M, -1).any(axis=1))[0])
        raise NumericalFailure(f"g is not finite at draw {m}: {ens.draws[m].tolist()}")
    return vals


def posterior_expect(ens, g):
    """``E_w[g(w)]`` under the ensemble.

    ``g`` maps the ``(M, d)`` draw matrix to ``M`` values (or ``(M, k)``);
    a precomputed array of per-draw values is also accepted.
    """
    vals = _eval_g(ens, g)
    return np.tensordot(ens.weights, vals, axes=(0, 0))


class LooExpectation(NamedTuple):
    value: float
    n_eff: float
    low_ess: bool


def loo_log_weights(ens, i):
    """Normalised log weights of the posterior with sample ``i`` left out."""
    lw = ens.log_norm_weights - ens.beta * ens.loglik[:, i]
    return lw - logsumexp(lw)


def importance_ess(log_w):
    """Kish effective sample size ``(sum u)^2 / sum u^2`` of log weights."""
    return float(np.exp(2.0 * logsumexp(log_w) - logsumexp(2.0 * log_w)))


def loo_expect(ens, i, g, ess_floor=0.1):
    """``E_w^{(i)}[g]`` by reweighting with ``p(X_i|w)^{-beta}`` (``i`` is 0-based).

    For Metropolis ensembles a warning is emitted when the importance
    effective sample size drops below ``ess_floor * M``.
    """
    if not 0 <= i < ens.n:
        raise IndexError(f"sample index {i} out of range for n = {ens.n}")
    lw = loo_log_weights(ens, i)
    vals = _eval_g(ens, g)
    n_eff = importance_ess(lw)
    low = ens.provenance == "mcmc" and n_eff < ess_floor * ens.M
    if low:
        warnings.warn(f"LOO importance ESS {n_eff:.1f} < {ess_floor} * M at sample {i}",
                      DiagnosticWarning, stacklevel=2)
    return LooExpectation(np.tensordot(np.exp(lw), vals, axes=(0, 0)), n_eff, low)


def refit_loo_posterior(model, dataset, i, beta, backend):
    """Posterior rebuilt from scratch on the dataset without sample ``i``.

    Metropolis refits reuse the config with a seed sub-keyed by ``i``.
    """
    if dataset.n < 2:
        raise ValueError("refit LOO needs n >= 2")
    if isinstance(backend, McmcConfig):
        backend = backend.with_seed(10_000 + i)
    return build_posterior(model, dataset.drop(i), beta, backend)


# -- persistence --------------------------------------------------------------

def save_ensemble(path, ens, config=None):
    """Write an ensemble to a NumPy ``.npz`` archive (format version 1)."""
    header = {
        "format": "bayescv-ensemble",
        "version": ENSEMBLE_FORMAT_VERSION,
        "beta": ens.beta,
        "provenance": ens.provenance,
        "config_hash": ens.config_hash,
        "config": config,
        "diagnostics": ens.diagnostics,
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True, default=str)),
                 draws=ens.draws, log_weights=ens.log_weights, loglik=ens.loglik)


def load_ensemble(path):
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != "bayescv-ensemble":
            raise ValueError(f"{path}: not an ensemble archive")
        if header["version"] > ENSEMBLE_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported ensemble format version {header['version']}")
        return PosteriorEnsemble(z["draws"], z["log_weights"], float(header["beta"]),
                                 header["provenance"], z["loglik"], header.get("diagnostics") or {},
                                 header.get("config_hash", ""))
