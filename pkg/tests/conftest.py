import numpy as np
import pytest

from eegkd.dataio import generate_synthetic_corpus
from eegkd.recurrent import StackConfig, init_stack

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_corpus():
    return generate_synthetic_corpus(4, 5, 1, 12, 3, 0.1, seed=3)


@pytest.fixture
def tiny_stack():
    return init_stack(StackConfig(depth=2, hidden=5, bidirectional=True, recurrent_dropout=0.5,
                                  num_classes=3, input_channels=4), seed=7)


@pytest.fixture
def acceptance_report():
    def record(criterion, passed, detail):
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
