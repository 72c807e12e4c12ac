from collections import defaultdict

import pytest

_outcomes: dict[int, list[str]] = defaultdict(list)
_titles: dict[int, str] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", m.args[0]))
            _titles[m.args[0]] = m.args[1]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        # an expected failure is still a failed criterion
        ok = rep.passed and not hasattr(rep, "wasxfail")
        _outcomes[m.args[0]].append("PASS" if ok else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_outcomes):
        status = "PASS" if all(s == "PASS" for s in _outcomes[k]) else "FAIL"
        terminalreporter.write_line(f"criterion {k:2d} {status}: {_titles[k]}")
