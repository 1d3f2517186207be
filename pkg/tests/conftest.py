import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from delaynet.models import DiscreteLti

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=60
)
settings.load_profile("default")


@pytest.fixture
def scalar_model():
    def make(A=0.5, B=1.0, C=1.0, P_r=0.0):
        return DiscreteLti(A=[[A]], B=[[B]], C=[[C]], P_r=[[P_r]], T_c=0.05)

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance criteria record one line each; they are echoed after the run so
# they show up even when pytest captures stdout.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
