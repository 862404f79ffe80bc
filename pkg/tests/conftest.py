import numpy as np
import pytest
from hypothesis import settings

from cardioplan.phantom import generate, sample_population

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(scope="session")
def population():
    """Four phantom specs from the default ranges."""
    return [s for s, _ in sample_population(4, seed=7)]


@pytest.fixture(scope="session")
def phantom(population):
    """(spec, volume, truth, rois) of the first population member."""
    spec = population[0]
    v, truth, rois = generate(spec)
    return spec, v, truth, rois


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for a numbered acceptance criterion."""
    store = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number: int, passed: bool, detail: str, soft: bool = False):
        status = "PASS" if passed else "FAIL"
        if soft:
            status += " (soft, reported only)"
        line = f"criterion {number:2d}: {status}  {detail}"
        store[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(ACCEPTANCE, None)
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        terminalreporter.write_line(store[n])
