import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scmoe.model import ModelConfig

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Smallest config that still has every block type (dropout off for exact checks)."""
    return ModelConfig(input_dim=6, vocab_size=8, d_model=8, d_ff=12, heads=2, conv_kernel=3,
                       m=1, h=1, k=1, g=1, dropout=0.0)


# ---------------------------------------------------------------- acceptance report

_CRITERIA: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    n, title = marker.args
    details = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    status = "PASS" if rep.passed else "FAIL"
    _CRITERIA.append(f"criterion {n} {status}: {title}" + (f" [{details}]" if details else ""))


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
