import numpy as np
import pytest
from hypothesis import settings

from dafh.data import Dataset, Schema, gen_synthetic

settings.register_profile("dafh", deadline=None, max_examples=100)
settings.load_profile("dafh")


@pytest.fixture(scope="session")
def synth():
    return gen_synthetic(20000, 0.4, 0.3, seed=0)


@pytest.fixture(scope="session")
def small_synth():
    return gen_synthetic(2000, 0.4, 0.3, seed=3)


def make_dataset(x, y, sensitive=None, names=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    names = tuple(names or (f"f{i}" for i in range(x.shape[1])))
    kinds = {n: "numeric" for n in names}
    return Dataset(x, np.asarray(y), sensitive, Schema(names, column_kinds=kinds))


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def record_acceptance(number, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
