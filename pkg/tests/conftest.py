import numpy as np
import pytest

from hmmsb.model import DirectedNetwork, Hyperparams


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def hyper2():
    return Hyperparams(gamma=1.0, m=0.5, pi=0.5, lambda1=0.5, lambda2=0.5, max_depth=2)


def random_network(n, density, rng):
    e = (rng.random((n, n)) < density).astype(np.uint8)
    return DirectedNetwork(e)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def record():
    """Store a one-line verdict for an acceptance criterion."""
    def _record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
