"""Statistical models, true distributions and training datasets.

Every model evaluates its log density in batch form: ``log_density(X, W)``
takes ``n`` samples (rows of ``X``) and ``M`` parameter vectors (rows of
``W``) and returns the ``M x n`` matrix of ``log p(X_i | w_m)``.  The
posterior machinery caches exactly this matrix.

Three families are bundled:

* :class:`RegularNormal` -- ``x ~ N(w, 1)``, a regular one-parameter model.
* :class:`ProductRegression` -- ``y ~ N(a*b*x, 1)``, the smallest singular
  model (the true set ``ab = 0`` is a cross).
* :class:`TanhNetwork` -- three-layer tanh regression ``R_H(x, w)`` with
  Gaussian output noise; over-parameterised relative to a smaller truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from fractions import Fraction

import numpy as np
from scipy import special, stats

from .errors import DomainError
from .seeding import make_rng

LOG_2PI = math.log(2.0 * math.pi)


def _log_box_mass(lo, hi, scale):
    """log P(lo <= Z*scale <= hi) per coordinate, summed."""
    a = np.asarray(lo, dtype=float) / scale
    b = np.asarray(hi, dtype=float) / scale
    # log(Phi(b) - Phi(a)) computed through the upper tail for stability
    mass = special.log_ndtr(b) + np.log1p(-np.exp(special.log_ndtr(a) - special.log_ndtr(b)))
    return float(np.sum(mass))


@dataclass(frozen=True)
class ModelSpec:
    """Base class for a parametric density ``p(x|w)`` with a prior on a box.

    Subclasses implement :meth:`log_density` and :meth:`sample`.  The prior
    is either uniform on the box (``prior_scale is None``) or an isotropic
    Gaussian ``N(0, prior_scale^2 I)`` truncated and renormalised to the box.
    """

    name: str
    d: int
    sample_dim: int
    lo: tuple
    hi: tuple
    prior_scale: float | None = None

    @property
    def bounds(self):
        return np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)

    def params(self):
        """Hyperparameters needed to rebuild this model (used in manifests)."""
        return {"prior_scale": self.prior_scale}

    # -- domain and prior -------------------------------------------------
    def in_domain(self, W):
        lo, hi = self.bounds
        W = np.asarray(W, dtype=float)
        return np.all((W >= lo) & (W <= hi), axis=-1)

    def check_domain(self, w):
        w = np.asarray(w, dtype=float)
        if w.shape != (self.d,):
            raise DomainError(f"{self.name}: expected parameter of length {self.d}, got shape {w.shape}")
        lo, hi = self.bounds
        bad = np.flatnonzero(~((w >= lo) & (w <= hi)))
        if bad.size:
            j = int(bad[0])
            raise DomainError(
                f"{self.name}: coordinate {j} = {w[j]!r} outside [{lo[j]}, {hi[j]}]", index=j
            )
        return w

    def log_prior(self, W):
        """Normalised log prior density; ``-inf`` outside the box."""
        W = np.asarray(W, dtype=float)
        lo, hi = self.bounds
        inside = self.in_domain(W)
        if self.prior_scale is None:
            val = -float(np.sum(np.log(hi - lo)))
            out = np.full(W.shape[:-1], val)
        else:
            out = -0.5 * np.sum(W**2, axis=-1) / self.prior_scale**2 + self._log_prior_const
        return np.where(inside, out, -np.inf)

    @cached_property
    def _log_prior_const(self):
        s = self.prior_scale
        lo, hi = self.bounds
        return -self.d * (math.log(s) + 0.5 * LOG_2PI) - _log_box_mass(lo, hi, s)

    def sample_prior(self, size, rng):
        lo, hi = self.bounds
        if self.prior_scale is None:
            return rng.uniform(lo, hi, size=(size, self.d))
        a, b = lo / self.prior_scale, hi / self.prior_scale
        return stats.truncnorm.rvs(a, b, scale=self.prior_scale, size=(size, self.d), random_state=rng)

    # -- densities --------------------------------------------------------
    def log_density(self, X, W):
        """Matrix of ``log p(X_i | w_m)``, shape ``(len(W), len(X))``."""
        raise NotImplementedError

    def log_likelihood_sum(self, X, w):
        """``sum_i log p(X_i|w)`` for a single parameter vector."""
        return float(np.sum(self.log_density(X, np.asarray(w)[None, :])))

    def sample(self, w, n, rng):
        """Draw ``n`` samples from ``p(.|w)``."""
        raise NotImplementedError

    def entropy(self, w):
        """Differential entropy of ``p(.|w)`` if known in closed form."""
        return None

    def quadrature_rule(self, w, order):
        """Nodes and log-probability weights integrating against ``p(.|w)``.

        Returns ``None`` when the family has no tensor rule (high sample
        dimension); callers fall back to Monte Carlo.
        """
        return None

    def embed(self, w_small):
        """Map a parameter of the generating family into this model's coordinates."""
        return np.asarray(w_small, dtype=float)


def _hermite(order):
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    return nodes, np.log(weights) - 0.5 * LOG_2PI


@dataclass(frozen=True)
class RegularNormal(ModelSpec):
    """``p(x|w) = N(x; w, 1)`` with a truncated Gaussian prior on ``[-bound, bound]``."""

    name: str = "regular_normal"
    d: int = 1
    sample_dim: int = 1
    lo: tuple = (-40.0,)
    hi: tuple = (40.0,)
    prior_scale: float | None = 10.0

    @classmethod
    def create(cls, prior_scale=10.0, bound=40.0):
        return cls(lo=(-float(bound),), hi=(float(bound),), prior_scale=prior_scale)

    def params(self):
        return {"prior_scale": self.prior_scale, "bound": self.hi[0]}

    def log_density(self, X, W):
        X = np.asarray(X, dtype=float).reshape(-1, 1)
        W = np.asarray(W, dtype=float).reshape(-1, 1)
        return -0.5 * LOG_2PI - 0.5 * (X[:, 0][None, :] - W[:, 0][:, None]) ** 2

    def sample(self, w, n, rng):
        return (w[0] + rng.standard_normal(n)).reshape(n, 1)

    def entropy(self, w):
        return 0.5 * (LOG_2PI + 1.0)

    def quadrature_rule(self, w, order):
        z, logw = _hermite(order)
        return (w[0] + z).reshape(-1, 1), logw


@dataclass(frozen=True)
class ProductRegression(ModelSpec):
    """``p(x, y | a, b) = N(x; 0, 1) N(y; a*b*x, 1)``.

    The covariate density is known and fixed; it is carried in the log
    density so the joint integrates to one, and cancels from every error.
    """

    name: str = "product_regression"
    d: int = 2
    sample_dim: int = 2
    lo: tuple = (-2.0, -2.0)
    hi: tuple = (2.0, 2.0)
    prior_scale: float | None = None
    sigma: float = 1.0

    @classmethod
    def create(cls, bound=2.0, prior_scale=None):
        b = float(bound)
        return cls(lo=(-b, -b), hi=(b, b), prior_scale=prior_scale)

    def params(self):
        return {"prior_scale": self.prior_scale, "bound": self.hi[0]}

    def regression_mean(self, Xin, W):
        """``R(x, w) = a*b*x``; shape ``(M, n, 1)``."""
        W = np.asarray(W, dtype=float).reshape(-1, 2)
        u = W[:, 0] * W[:, 1]
        return (u[:, None] * np.asarray(Xin, dtype=float)[:, 0][None, :])[..., None]

    def log_density(self, X, W):
        X = np.asarray(X, dtype=float).reshape(-1, 2)
        W = np.asarray(W, dtype=float).reshape(-1, 2)
        x, y = X[:, 0], X[:, 1]
        u = W[:, 0] * W[:, 1]
        resid = y[None, :] - u[:, None] * x[None, :]
        return -LOG_2PI - 0.5 * x[None, :] ** 2 - 0.5 * resid**2

    def sample(self, w, n, rng):
        x = rng.standard_normal(n)
        y = w[0] * w[1] * x + rng.standard_normal(n)
        return np.column_stack([x, y])

    def entropy(self, w):
        return LOG_2PI + 1.0

    def quadrature_rule(self, w, order):
        z, logw = _hermite(order)
        zx, zy = np.meshgrid(z, z, indexing="ij")
        lx, ly = np.meshgrid(logw, logw, indexing="ij")
        x = zx.ravel()
        y = w[0] * w[1] * x + zy.ravel()
        return np.column_stack([x, y]), (lx + ly).ravel()


@dataclass(frozen=True)
class TanhNetwork(ModelSpec):
    """Three-layer tanh regression on ``x, y in R^3``.

    ``R_H(x, w) = sum_h a_h tanh(b_h . x)`` with flat parameter layout
    ``[a_1, b_1, ..., a_H, b_H]`` (``d = 6H``).  The input density
    ``s(x) = N(0, input_scale^2 I)`` is fixed and never estimated.
    """

    name: str = "tanh_network"
    d: int = 18
    sample_dim: int = 6
    lo: tuple = (-40.0,) * 18
    hi: tuple = (40.0,) * 18
    prior_scale: float | None = 10.0
    H: int = 3
    sigma: float = 0.1
    input_scale: float = 2.0

    @classmethod
    def create(cls, H=3, sigma=0.1, prior_scale=10.0, bound=40.0, input_scale=2.0):
        d = 6 * int(H)
        b = float(bound)
        return cls(
            d=d, lo=(-b,) * d, hi=(b,) * d, prior_scale=prior_scale,
            H=int(H), sigma=float(sigma), input_scale=float(input_scale),
        )

    def params(self):
        return {
            "H": self.H, "sigma": self.sigma, "prior_scale": self.prior_scale,
            "bound": self.hi[0], "input_scale": self.input_scale,
        }

    def regression_mean(self, Xin, W):
        """Network output, shape ``(M, n, 3)``."""
        W = np.asarray(W, dtype=float).reshape(-1, self.H, 2, 3)
        Xin = np.asarray(Xin, dtype=float)
        z = np.tanh(np.einsum("mhk,nk->mnh", W[:, :, 1, :], Xin))
        return np.einsum("mnh,mhk->mnk", z, W[:, :, 0, :])

    def log_input_density(self, Xin):
        s = self.input_scale
        return -1.5 * LOG_2PI - 3.0 * math.log(s) - 0.5 * np.sum(Xin**2, axis=-1) / s**2

    def log_density(self, X, W):
        X = np.asarray(X, dtype=float).reshape(-1, 6)
        Xin, Y = X[:, :3], X[:, 3:]
        R = self.regression_mean(Xin, W)
        sq = np.sum((Y[None, :, :] - R) ** 2, axis=-1)
        return (
            self.log_input_density(Xin)[None, :]
            - 1.5 * LOG_2PI - 3.0 * math.log(self.sigma)
            - sq / (2.0 * self.sigma**2)
        )

    def log_likelihood_sum(self, X, w):
        # single-parameter fast path used inside Metropolis steps
        Wr = np.asarray(w, dtype=float).reshape(self.H, 2, 3)
        Xin, Y = X[:, :3], X[:, 3:]
        R = np.tanh(Xin @ Wr[:, 1, :].T) @ Wr[:, 0, :]
        sq = float(np.sum((Y - R) ** 2))
        n = X.shape[0]
        const = float(np.sum(self.log_input_density(Xin))) - n * (1.5 * LOG_2PI + 3.0 * math.log(self.sigma))
        return const - sq / (2.0 * self.sigma**2)

    def sample(self, w, n, rng):
        Xin = self.input_scale * rng.standard_normal((n, 3))
        R = self.regression_mean(Xin, np.asarray(w)[None, :])[0]
        Y = R + self.sigma * rng.standard_normal((n, 3))
        return np.hstack([Xin, Y])

    def entropy(self, w):
        return 1.5 * (LOG_2PI + 1.0) + 3.0 * math.log(self.input_scale) + 1.5 * (
            LOG_2PI + 1.0
        ) + 3.0 * math.log(self.sigma)

    def embed(self, w_small):
        """Zero-pad a smaller network's parameter; extra units get ``a_h = b_h = 0``."""
        w_small = np.asarray(w_small, dtype=float)
        out = np.zeros(self.d)
        out[: w_small.size] = w_small
        return out


@dataclass(frozen=True)
class Dataset:
    """``n`` training samples with their cached empirical log loss ``Ln``.

    ``log_p0`` holds ``log p0(X_i)`` per sample when a truth is attached;
    in field use it is ``None`` and ``Ln`` is unavailable.
    """

    samples: np.ndarray
    log_p0: np.ndarray | None = None
    seed: object = None

    @property
    def n(self):
        return int(self.samples.shape[0])

    def __len__(self):
        return self.n

    @property
    def Ln(self):
        if self.log_p0 is None or self.n == 0:
            return None
        return float(-np.mean(self.log_p0))

    def drop(self, i):
        """Dataset with sample ``i`` removed."""
        keep = np.arange(self.n) != i
        lp = None if self.log_p0 is None else self.log_p0[keep]
        return Dataset(self.samples[keep], lp, self.seed)

    def head(self, m):
        lp = None if self.log_p0 is None else self.log_p0[:m]
        return Dataset(self.samples[:m], lp, self.seed)


@dataclass(frozen=True)
class TruthSpec:
    """The data-generating side: ``q = p_gen(.|w_true)``.

    All bundled truths are realizable, so ``p0 = q`` and ``L0 = S``.
    ``w0`` is an explicit optimal parameter in the *learning* model's
    coordinates (``f(x, w0) = 0``).
    """

    generator: ModelSpec
    w_true: tuple
    w0: tuple | None = None
    entropy_S: float | None = None
    L0: float | None = None
    lambda_analytic: Fraction | None = None
    realizable: bool = True

    def __post_init__(self):
        if self.lambda_analytic is not None and self.lambda_analytic <= 0:
            raise ValueError("lambda_analytic must be positive")

    def log_p0(self, X):
        return self.generator.log_density(X, np.asarray(self.w_true)[None, :])[0]

    def draw(self, n, rng):
        return self.generator.sample(np.asarray(self.w_true, dtype=float), n, rng)

    def quadrature_rule(self, order):
        return self.generator.quadrature_rule(np.asarray(self.w_true, dtype=float), order)


def sample_truth(truth, n, seed):
    """Draw an i.i.d. training set of size ``n`` from ``truth``.

    ``seed`` is an int, a tuple of ints (see :func:`make_rng`) or a
    generator; the same seed always reproduces the same samples bit for bit.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    rng = make_rng(seed)
    X = truth.draw(n, rng)
    X = np.asarray(X, dtype=float).reshape(n, truth.generator.sample_dim)
    return Dataset(X, truth.log_p0(X), seed)


def log_density(model, x, w):
    """Scalar ``log p(x|w)`` with domain validation."""
    w = model.check_domain(w)
    x = np.asarray(x, dtype=float).reshape(1, model.sample_dim)
    return float(model.log_density(x, w[None, :])[0, 0])


def log_density_ratio(model, truth, x, w):
    """``f(x, w) = log p0(x) - log p(x|w)``."""
    lp = log_density(model, x, w)
    x = np.asarray(x, dtype=float).reshape(1, model.sample_dim)
    return float(truth.log_p0(x)[0]) - lp


def kl_to_truth(model, truth, w, mc_size, seed):
    """Monte Carlo estimate of ``K(w) = E_X[f(X, w)]``.

    Returns
    -------
    (float, float)
        Estimate and its standard error.
    """
    if mc_size < 1:
        raise ValueError("mc_size must be >= 1")
    w = model.check_domain(w)
    X = sample_truth(truth, mc_size, seed).samples
    f = truth.log_p0(X) - model.log_density(X, w[None, :])[0]
    se = float(np.std(f, ddof=1) / math.sqrt(mc_size)) if mc_size > 1 else float("inf")
    return float(np.mean(f)), se


# -- registry ---------------------------------------------------------------

DEFAULT_TANH_TRUTH = (1.0, -1.0, 0.5, 0.5, 0.5, -0.5)


def make_regular_normal(prior_scale=10.0, bound=40.0, w_true=0.0):
    model = RegularNormal.create(prior_scale=prior_scale, bound=bound)
    S = model.entropy(None)
    truth = TruthSpec(
        generator=model, w_true=(float(w_true),), w0=(float(w_true),),
        entropy_S=S, L0=S, lambda_analytic=Fraction(1, 2),
    )
    return model, truth


def make_product_regression(bound=2.0, prior_scale=None, a_true=0.0, b_true=0.0):
    model = ProductRegression.create(bound=bound, prior_scale=prior_scale)
    S = model.entropy(None)
    w = (float(a_true), float(b_true))
    # true set {ab = a_true*b_true} is a (possibly crossing) curve of codimension one
    truth = TruthSpec(
        generator=model, w_true=w, w0=w, entropy_S=S, L0=S, lambda_analytic=Fraction(1, 2),
    )
    return model, truth


def make_tanh_network(H=3, H0=1, sigma=0.1, prior_scale=10.0, bound=40.0,
                      input_scale=2.0, w_true=None):
    if H0 > H:
        raise ValueError("H0 must not exceed H")
    model = TanhNetwork.create(H=H, sigma=sigma, prior_scale=prior_scale, bound=bound,
                               input_scale=input_scale)
    gen = TanhNetwork.create(H=H0, sigma=sigma, prior_scale=prior_scale, bound=bound,
                             input_scale=input_scale)
    if w_true is None:
        w_true = np.tile(DEFAULT_TANH_TRUTH, H0)
    w_true = tuple(float(v) for v in w_true)
    if len(w_true) != 6 * H0:
        raise ValueError(f"w_true must have length {6 * H0}")
    S = gen.entropy(None)
    truth = TruthSpec(
        generator=gen, w_true=w_true, w0=tuple(model.embed(w_true)),
        entropy_S=S, L0=S, lambda_analytic=None,
    )
    return model, truth


MODEL_REGISTRY = {
    "regular_normal": make_regular_normal,
    "product_regression": make_product_regression,
    "tanh_network": make_tanh_network,
}


def make_model(name, **params):
    """Build ``(ModelSpec, TruthSpec)`` for a registered model name."""
    try:
        factory = MODEL_REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; known: {sorted(MODEL_REGISTRY)}") from None
    return factory(**params)
