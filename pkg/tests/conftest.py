"""Shared fixtures and independent oracles for the test-suite."""

import math

import numpy as np
import pytest

from convlos.convolution import ConvolutiveLongStay
from convlos.distributions import ContDistSpec, CountDistSpec
from convlos.mixture import MixtureModel


def normal_pdf(x, mu, sigma):
    return math.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))


def lognormal_pdf(x, mu, sigma):
    if x <= 0:
        return 0.0
    return math.exp(-0.5 * ((math.log(x) - mu) / sigma) ** 2) / (x * sigma * math.sqrt(2 * math.pi))


def negbin_pmf(k, r, p):
    return math.exp(math.lgamma(r + k) - math.lgamma(r) - math.lgamma(k + 1)) * p**r * (1 - p) ** k


def poisson_pmf(k, lam):
    return math.exp(k * math.log(lam) - lam - math.lgamma(k + 1))


def cmp_pmf(k, lam, nu, terms=400):
    z = math.fsum(math.exp(j * math.log(lam) - nu * math.lgamma(j + 1)) for j in range(terms))
    return math.exp(k * math.log(lam) - nu * math.lgamma(k + 1)) / z


def binomial_pmf(k, n, p):
    if k > n:
        return 0.0
    return math.comb(n, k) * p**k * (1 - p) ** (n - k)


@pytest.fixture
def truth_model():
    """The reference configuration used by the recovery checks."""
    return MixtureModel(
        0.3,
        ContDistSpec.lognormal(-1.0, 0.5),
        ConvolutiveLongStay(CountDistSpec.negbin(2.0, 0.4), ContDistSpec.normal(4.0, 1.0)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
