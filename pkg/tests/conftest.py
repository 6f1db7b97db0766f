import numpy as np
import pytest

from protoshot.dataset import LabeledExample, LongTailDataset


def sized_dataset(sizes, dim=4, seed=0, prefix="c"):
    """Vector dataset with one class per entry of ``sizes`` (class names c0, c1, ...)."""
    rng = np.random.default_rng(seed)
    examples = []
    for k, n in enumerate(sizes):
        for i in range(n):
            examples.append(LabeledExample(rng.standard_normal(dim), f"{prefix}{k}", f"{prefix}{k}-{i}"))
    return LongTailDataset(examples)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
