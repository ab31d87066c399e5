import numpy as np
import pytest

from galr import tensor as T
from galr.separator import TOY, SeparatorModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def clean_tape():
    T.reset_tape()
    yield
    T.reset_tape()


@pytest.fixture(scope="session")
def toy_model():
    return SeparatorModel(TOY, seed=0)


CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
