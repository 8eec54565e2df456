import numpy as np
import pytest

from dexpression import network as N
from dexpression.synthetic import make_toy_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_graph():
    """Full DeXpression topology on 16x16 inputs."""
    return N.build_dexpression(2, input_size=16)


@pytest.fixture(scope="session")
def toy_dataset():
    return make_toy_dataset(8, size=16, seed=0)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion, printed at the end of the run."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        status = "PASS" if passed else "FAIL"
        _ACCEPTANCE[number] = f"criterion {number} {title}: {status}" + (f" ({detail})" if detail else "")
        print(_ACCEPTANCE[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
