import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


def random_spd(rng, n, cond=50.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.geomspace(1.0, cond, n) * rng.uniform(0.5, 2.0)
    return (q * eig) @ q.T


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
