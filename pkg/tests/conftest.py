import pytest
from hypothesis import HealthCheck, settings

from eqkd.config import Config

# Numba compiles on first call, so per-example deadlines are meaningless.
settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# One line per acceptance criterion, filled in by test_acceptance.py.
ACCEPTANCE: list[str] = []


@pytest.fixture
def cfg():
    return Config().validate()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
