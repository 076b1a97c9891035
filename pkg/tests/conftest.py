import numpy as np
import pytest

from auctionope.core import LoggedDataset


def make_dataset(n=50, d=3, seed=0, propensities=True, side="control"):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    a = rng.uniform(0.1, 2.0, size=n)
    r = np.abs(rng.normal(size=(n, 4)))
    p = rng.uniform(0.2, 1.5, size=n) if propensities else np.full(n, np.nan)
    return LoggedDataset(X, a, r, p, policy_id="test", side=side, dimension=d)


@pytest.fixture
def small_dataset():
    return make_dataset()


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
