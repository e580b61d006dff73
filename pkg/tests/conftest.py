import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from xseg3d.rng import Rng  # noqa: E402
from xseg3d.unet import TINY_CONFIG, build  # noqa: E402


@pytest.fixture
def tiny64():
    return build(TINY_CONFIG, Rng(0), dtype=np.float64)


@pytest.fixture
def tiny32():
    return build(TINY_CONFIG, Rng(0), dtype=np.float32)


@pytest.fixture
def synth_small():
    from xseg3d.data import generate_synthetic

    return generate_synthetic(3, (16, 16, 16), Rng(5))


def pytest_terminal_summary(terminalreporter):
    from criteria import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
