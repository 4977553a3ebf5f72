import os

import numpy as np
import pytest

os.environ.setdefault("ARK_THREADS", "0")

from ark.data import generate_synthetic_suite  # noqa: E402
from ark.nn import EncoderConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_suite():
    """Three small 16px tasks covering every label mode."""
    return generate_synthetic_suite(
        n_tasks=3,
        sizes=120,
        image_size=16,
        seed=3,
        label_modes=["multilabel", "multiclass", "binary"],
        distractors=0,
        split_fractions={"pretrain": 0.5, "train": 0.25, "val": 0.05, "test": 0.2},
    )


@pytest.fixture(scope="session")
def tiny_encoder():
    return EncoderConfig("conv", (4,), (1, 16, 16), 8)


ACCEPTANCE_LINES = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> str:
    """Store and print one pass/fail line for an acceptance criterion."""
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
