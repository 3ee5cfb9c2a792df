import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from diffplan.calibration import CalibrationConfig, calibrate  # noqa: E402
from diffplan.toy import TinyDiT, cosine_schedule  # noqa: E402

FROZEN = json.loads((Path(__file__).parent / "data" / "frozen.json").read_text())

# tests/test_acceptance.py appends (criterion, passed, detail) rows here
ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def frozen():
    return FROZEN


@pytest.fixture(scope="session")
def teacher():
    return TinyDiT(seed=42)


@pytest.fixture(scope="session")
def sched():
    return cosine_schedule(100)


@pytest.fixture(scope="session")
def calib_light(teacher, sched):
    """Calibration without the drift-based signals: fast, enough for reservoirs and tiers."""
    return calibrate(teacher, sched, CalibrationConfig(n_samples=128, signals=False), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, title, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title} ({detail})")
