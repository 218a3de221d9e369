"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

import pytest

_OUTCOMES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test checks")
    config.stash[_OUTCOMES] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    # a failing setup (e.g. a crashed fixture) counts against the criterion too
    if report.when == "call" or report.outcome != "passed":
        n = marker.args[0]
        results = item.config.stash[_OUTCOMES].setdefault(n, [])
        details = [v for k, v in item.user_properties if k == "detail"]
        results.append((report.outcome, item.name, details))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = config.stash[_OUTCOMES]
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(outcomes):
        results = outcomes[n]
        ok = all(o == "passed" for o, _, _ in results)
        skipped = all(o == "skipped" for o, _, _ in results)
        status = "SKIP" if skipped else ("PASS" if ok else "FAIL")
        detail = "; ".join(d for _, _, ds in results for d in ds)
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}".rstrip())
