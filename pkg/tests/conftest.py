from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from crdro.config import load_config
from crdro.experiments import cmd_bench

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="session")
def bench_10class(tmp_path_factory):
    """Stock ten-class benchmark (five seeds, four solvers); run once per session."""
    out = tmp_path_factory.mktemp("bench_10class")
    rows = cmd_bench(load_config(CONFIGS / "bench_10class.ini"), out)
    return rows, out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
