import numpy as np
import pytest

from screencal.core_types import CensoredDataset, SurvivalCurveSet, TimeGrid
from screencal.models import WeibullModel, WeibullPopulation


def make_dataset(time, event, covariates=None, ids=None):
    time = np.asarray(time, dtype=float)
    n = time.size
    if covariates is None:
        covariates = np.zeros((n, 1))
    if ids is None:
        ids = [str(i) for i in range(n)]
    return CensoredDataset(np.array(ids, dtype=object), np.asarray(covariates, dtype=float).reshape(n, -1),
                           time, np.asarray(event, dtype=bool))


def constant_curves(ids, value=1.0, times=(0.5, 100.0)):
    ids = np.array(ids, dtype=object)
    return SurvivalCurveSet(ids, TimeGrid(np.asarray(times)), np.full((ids.size, len(times)), value))


@pytest.fixture(scope="session")
def population():
    """Two-covariate Weibull population with a moderate event rate at t0 = 1."""
    return WeibullPopulation(WeibullModel(1.5, 1.4, (0.6, -0.4)), WeibullModel(1.0, 1.5, (0.2, 0.2)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def record_acceptance(number, title, passed, detail=""):
    """Register one PASS/FAIL line, shown at the end of the pytest run."""
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
