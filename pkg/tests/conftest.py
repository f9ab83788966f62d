import math

import numpy as np
import pytest
from hypothesis import settings

from twlab.gsource import GSpec, RngStream
from twlab.langmodel import iid_model, make_distribution

# first calls compile numba kernels
settings.register_profile("lab", deadline=None)
settings.load_profile("lab")


def binom_sigma(p, n):
    return math.sqrt(p * (1 - p) / n)


@pytest.fixture
def zipf_model():
    return iid_model(make_distribution("zipf", 1000, s=1.1))


@pytest.fixture
def small_model():
    return iid_model(make_distribution("zipf", 8, s=1.0))


@pytest.fixture(params=["bernoulli(0.5)", "uniform"])
def gspec(request):
    return GSpec.parse(request.param)


@pytest.fixture
def rng():
    return RngStream.from_seed(20241015)


@pytest.fixture
def np_rng():
    return np.random.default_rng(5)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
