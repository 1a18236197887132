import numpy as np
import pytest

from btn.config import ModelConfig
from btn.model import build_mcnn_micro


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro():
    return build_mcnn_micro(ModelConfig())


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training runs")


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion; printed at the end of the run."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
