import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from d2quant.model import ModelConfig, init_random

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")

SMALL = ModelConfig(n_layers=2, d_model=32, n_heads=2, d_ffn=64, max_seq=32)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_model():
    return init_random(SMALL, 7)


@pytest.fixture
def fixture_text() -> bytes:
    with open(os.path.join(FIXTURES, "calib.txt"), "rb") as fh:
        return fh.read()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
