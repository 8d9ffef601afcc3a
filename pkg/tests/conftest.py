import numpy as np
import pytest

from sftnkit.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randn(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape).astype(np.float64))


def away_from_zero(rng, *shape, margin=0.1):
    """Random values with |x| >= margin, so relu/maxpool kinks stay out of reach of finite differences."""
    x = rng.normal(size=shape)
    x = np.sign(x) * (np.abs(x) + margin)
    return Tensor(x.astype(np.float64))


_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def record_criterion():
    """Record (and print) one PASS/FAIL line per acceptance criterion."""
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
