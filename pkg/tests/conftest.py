from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

from superctl.measure_space import AtomicMeasure, default_family

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@st.composite
def atomic_measures(draw, max_atoms: int = 6, max_level: int = 12, lo: float = -4.0, hi: float = 4.0):
    level = draw(st.integers(1, max_level))
    k = draw(st.integers(0, max_atoms))
    xs = draw(st.lists(st.floats(lo, hi, allow_nan=False), min_size=k, max_size=k))
    ms = draw(st.lists(st.integers(1, 3 * level), min_size=k, max_size=k))
    return AtomicMeasure(level, np.array(xs, dtype=float).reshape(-1, 1), np.array(ms, dtype=np.int64))


@pytest.fixture(scope="session")
def family():
    return default_family()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import ACCEPTANCE_LINES
    except ImportError:  # pragma: no cover
        return
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
