import numpy as np
import pytest

from covla.datagen import DatasetSpec, generate_dataset
from covla.model import Dims


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_dims():
    return Dims(vocab_size=20, d_raw=4, d_T=6, d_V=5, d=8, d_c=8, n_categories=5)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(DatasetSpec(n_samples=200, seed=3))


@pytest.fixture(scope="session")
def small_dims():
    spec = DatasetSpec(n_samples=200, seed=3)
    return Dims(vocab_size=spec.vocab_size, d_raw=spec.d_raw, d_T=12, d_V=10, d=12, d_c=12,
                n_categories=spec.n_categories)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance(request):
    """Record one verdict line for the terminal summary."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
