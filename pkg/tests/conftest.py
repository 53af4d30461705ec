from pathlib import Path as FsPath

import numpy as np
import pytest
from hypothesis import settings

from corrfilt import LinearModel
from corrfilt.tables import read_path

DATA = FsPath(__file__).parent / "data"

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

BENCH = dict(A=-1.0, C=1.0, sigma0=1.0, sigma1=0.5, x0=1.0, T=1.0)

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture(scope="session")
def bench_model():
    return LinearModel(**BENCH)


@pytest.fixture(scope="session")
def bench_y_fine():
    return read_path(DATA / "benchmark_y_level8.csv")


@pytest.fixture(scope="session")
def bench_y(bench_y_fine):
    return bench_y_fine.subsample(6)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k.split()[0])):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def assert_within_se(est, target, se, k, what=""):
    est, target, se = map(np.asarray, (est, target, se))
    z = np.abs(est - target) / se
    assert np.all(z <= k), f"{what}: |{est} - {target}| = {z} SE > {k}"
