import numpy as np
import pytest

from densetl.tensor import Tensor, mul, reduce_sum


def weighted_sum(y: Tensor, seed: int = 0) -> Tensor:
    """Scalar probe sum(y * R) with fixed random R, so every output element matters."""
    r = np.random.default_rng(seed).standard_normal(y.shape)
    return reduce_sum(mul(y, Tensor(r, dtype=y.dtype)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
