import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_rel_error(analytic, numeric):
    """max |a - n| / max(1, |a|), the measure used by ``grad_check``."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return float((np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))).max())


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
