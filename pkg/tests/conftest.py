import numpy as np
import pytest

from bayescv.posterior import PosteriorEnsemble


def random_ensemble(rng, M=None, n=None, beta=None, scale=1.0, offset=-1.0, weighted=True):
    """Synthetic ensemble with O(1) log likelihoods and random weights."""
    M = M or int(rng.integers(2, 60))
    n = n or int(rng.integers(1, 25))
    beta = float(rng.uniform(0.1, 2.0)) if beta is None else beta
    L = offset + scale * rng.standard_normal((M, n))
    lw = rng.standard_normal(M) if weighted else np.zeros(M)
    return PosteriorEnsemble(rng.standard_normal((M, 1)), lw, beta, "quadrature", L)


def point_mass(loglik_row, beta=1.0, w=(0.0,)):
    L = np.asarray(loglik_row, dtype=float)[None, :]
    return PosteriorEnsemble(np.asarray([w], dtype=float), np.zeros(1), beta, "mcmc", L)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
