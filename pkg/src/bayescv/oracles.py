"""Closed-form reference values for the conjugate normal-mean model.

Model ``x ~ N(w, 1)``, prior ``N(0, tau^2)`` truncated to ``[-B, B]``,
likelihood tempered by ``beta``.  The posterior is Gaussian with precision
``P = 1/tau^2 + beta*n``; its truncation by the box is ignored (for the
bundled defaults it moves no mass above ``1e-300``), except in the evidence,
where the truncated prior normaliser and posterior box mass are included
exactly.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

LOG_2PI = math.log(2.0 * math.pi)


def _log_normal(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var


def _log_interval(a, b):
    """log(Phi(b) - Phi(a)) for a < b."""
    lb, la = special.log_ndtr(b), special.log_ndtr(a)
    return float(lb + np.log1p(-np.exp(la - lb)))


def conjugate_normal(x, beta=1.0, prior_scale=10.0, bound=40.0):
    """Exact criteria for the tempered conjugate normal-mean posterior.

    Returns a dict with ``post_mean``, ``post_var``, ``btl``, ``gtl``,
    ``v_n``, ``waic``, ``cv`` (exact leave-one-out), ``free_energy``
    (``-log`` marginal likelihood at ``beta``).
    """
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    S = float(np.sum(x))
    P = 1.0 / prior_scale**2 + beta * n
    m = beta * S / P
    s2 = 1.0 / P

    btl = -float(np.mean(_log_normal(x, m, 1.0 + s2)))
    gtl = float(np.mean(0.5 * LOG_2PI + 0.5 * ((x - m) ** 2 + s2)))
    v_n = float(np.sum((x - m) ** 2 * s2 + 0.5 * s2**2))
    waic = btl + beta / n * v_n

    P_loo = P - beta
    m_loo = beta * (S - x) / P_loo
    cv = -float(np.mean(_log_normal(x, m_loo, 1.0 + 1.0 / P_loo)))

    sqP = math.sqrt(P)
    log_z = (
        -0.5 * n * beta * LOG_2PI
        - 0.5 * beta * float(np.sum(x**2))
        + 0.5 * P * m**2
        + 0.5 * (LOG_2PI - math.log(P))
        + _log_interval((-bound - m) * sqP, (bound - m) * sqP)
        - math.log(prior_scale) - 0.5 * LOG_2PI
        - _log_interval(-bound / prior_scale, bound / prior_scale)
    )
    return {
        "post_mean": m, "post_var": s2, "btl": btl, "gtl": gtl, "v_n": v_n,
        "waic": waic, "cv": cv, "free_energy": -log_z,
    }
