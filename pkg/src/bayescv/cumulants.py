"""Functional cumulants of the per-sample log likelihood under the posterior.

``F(alpha) = (1/n) sum_i log E_w[p(X_i|w)^alpha]`` and its derivatives at
zero, ``Y_k = F^{(k)}(0)``.  The primary path uses centred per-sample
moments (two-pass: mean, then centred powers); the raw-moment formulas are
kept as an independent cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import NumericalFailure


@dataclass(frozen=True)
class CumulantSet:
    """``Y_1..Y_4``, the functional variance, and per-sample centred moments.

    ``per_sample`` has columns ``(l1, l2*, l3*, l4*)`` where ``l1`` is the
    posterior mean of ``log p(X_i|w)`` and ``lk*`` the centred moments.
    """

    y1: float
    y2: float
    y3: float
    y4: float
    v_n: float
    per_sample: np.ndarray


def generating_function(ens, alpha, window=None):
    """``F(alpha)`` evaluated from the cached log-likelihood matrix.

    ``|alpha|`` is limited to ``window`` (default ``1 + beta``).
    """
    limit = 1.0 + ens.beta if window is None else window
    if abs(alpha) > limit:
        raise ValueError(f"alpha = {alpha} outside the window |alpha| <= {limit}")
    if ens.n == 0:
        return 0.0
    if alpha == 0:
        return 0.0
    per = logsumexp(alpha * ens.loglik + ens.log_norm_weights[:, None], axis=0)
    bad = ~np.isfinite(per)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NumericalFailure(f"generating function overflow at sample {i}, alpha = {alpha}")
    return float(np.mean(per))


def centered_moments(ens):
    """Per-sample ``(l1, l2*, l3*, l4*)``, shape ``(n, 4)``."""
    w = ens.weights
    c = w @ ens.loglik
    D = ens.loglik - c[None, :]
    D2 = D * D
    out = np.empty((ens.n, 4))
    out[:, 0] = c
    out[:, 1] = w @ D2
    out[:, 2] = w @ (D2 * D)
    out[:, 3] = w @ (D2 * D2)
    return out


def cumulants(ens, dataset=None):
    """Functional cumulants from centred moments.

    ``Y2 = mean l2*``, ``Y3 = mean l3*``, ``Y4 = mean(l4* - 3 l2*^2)``, and
    ``V(n) = n * Y2``.
    """
    if dataset is not None and dataset.n != ens.n:
        raise ValueError("ensemble and dataset disagree on n")
    n = ens.n
    if n == 0:
        return CumulantSet(0.0, 0.0, 0.0, 0.0, 0.0, np.zeros((0, 4)))
    m = centered_moments(ens)
    y1 = float(np.mean(m[:, 0]))
    y2 = float(np.mean(m[:, 1]))
    y3 = float(np.mean(m[:, 2]))
    y4 = float(np.mean(m[:, 3] - 3.0 * m[:, 1] ** 2))
    return CumulantSet(y1, y2, y3, y4, n * y2, m)


def cumulants_uncentered(ens):
    """``(Y1, Y2, Y3, Y4)`` from raw moments ``l_k = E_w[(log p)^k]``.

    Suffers cancellation when ``|log p|`` is large; used only to cross-check
    :func:`cumulants`.
    """
    w = ens.weights
    L = ens.loglik
    l1 = w @ L
    l2 = w @ L**2
    l3 = w @ L**3
    l4 = w @ L**4
    y1 = np.mean(l1)
    y2 = np.mean(l2 - l1**2)
    y3 = np.mean(l3 - 3 * l2 * l1 + 2 * l1**3)
    y4 = np.mean(l4 - 4 * l3 * l1 - 3 * l2**2 + 12 * l2 * l1**2 - 6 * l1**4)
    return float(y1), float(y2), float(y3), float(y4)


def functional_variance(ens, dataset=None):
    """``V(n) = sum_i Var_w[log p(X_i|w)]``; identical to ``n * Y2``."""
    return cumulants(ens, dataset).v_n
