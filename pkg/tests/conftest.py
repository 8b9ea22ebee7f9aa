import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from svrc import model as mdl  # noqa: E402
from svrc.model_io import Registry  # noqa: E402

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_anchor():
    """Untrained but complete codec, small enough for fast pipeline tests."""
    return mdl.new_anchor(M=8, N=4, levels_main=16, levels_hyper=12, init_range=6.0, lam=0.01, seed=3)


@pytest.fixture
def tiny_registry(tmp_path, tiny_anchor):
    registry = Registry(tmp_path / "registry")
    registry.save_anchor(tiny_anchor)
    return registry
