import numpy as np
import pytest

_CRITERIA = {}

from smalcap.synthgen import GenConfig, Generator
from smalcap.toy import make_toy_model


@pytest.fixture(scope="session")
def model():
    return make_toy_model()


@pytest.fixture(scope="session")
def generator(model):
    return Generator(model, GenConfig())


@pytest.fixture(scope="session")
def sample(generator):
    """Memoized ``generator.sample``."""
    cache = {}

    def get(index):
        if index not in cache:
            cache[index] = generator.sample(index)
        return cache[index]

    return get


@pytest.fixture(scope="session")
def prior(generator):
    return generator.sampler.prior()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ----------------------------------------------------------------------
# acceptance report: one pass/fail line per criterion


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not rep.failed:
        return
    number, title = mark.args
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    if rep.when == "call" or rep.failed:
        _CRITERIA[number] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number} [{status}] {title}" + (f" -- {detail}" if detail else ""))
