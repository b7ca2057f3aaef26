import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def interior_texture(rng, size=64, lo=14, hi=50):
    """Random texture confined to ``[lo, hi)`` on a black canvas."""
    img = np.zeros((size, size, 1))
    img[lo:hi, lo:hi, 0] = rng.random((hi - lo, hi - lo))
    return img


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, printed once at the end of the run
VERDICTS = {}


def record(number, title, passed, detail):
    VERDICTS[number] = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    print(VERDICTS[number], flush=True)
    return passed


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[k])
