import time

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, derandomize=True, print_blob=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False})
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        state = "PASS" if e["ok"] and e["ran"] else ("FAIL" if not e["ok"] else "NOT RUN")
        terminalreporter.write_line(f"criterion {n:>2} {state}: {e['title']}")


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


@pytest.fixture(scope="session")
def multidrop_run():
    from si_opt.studies import StudyConfig, run_multidrop

    return _timed(lambda: run_multidrop(StudyConfig("multidrop")))


@pytest.fixture(scope="session")
def linkwidth_run():
    from si_opt.studies import StudyConfig, run_linkwidth

    return _timed(lambda: run_linkwidth(StudyConfig("linkwidth")))


@pytest.fixture(scope="session")
def sweep_run():
    from si_opt.studies import StudyConfig, run_length_sweep

    return _timed(lambda: run_length_sweep(StudyConfig("length-sweep")))
