import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vbspin.core import get_preset

settings.register_profile(
    "default", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def this_work():
    return get_preset("vb-this-work")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------ acceptance report

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(cid): acceptance criterion checked by the test")
    config.stash[_CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    cid = mark.args[0]
    ok, details = item.config.stash[_CRITERIA].get(cid, (True, []))
    details = details + [v for k, v in rep.user_properties if k == "detail"]
    item.config.stash[_CRITERIA][cid] = (ok and rep.passed, details)


def pytest_terminal_summary(terminalreporter, config):
    res = config.stash.get(_CRITERIA, {})
    if not res:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(res, key=lambda c: int(c[1:])):
        ok, details = res[cid]
        terminalreporter.write_line(f"{cid}: {'PASS' if ok else 'FAIL'}  {'; '.join(details)}")
