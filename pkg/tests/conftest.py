from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"
GOLDEN = DATA / "golden"

_acceptance: dict[str, list[str]] = {}


@pytest.fixture
def golden_dir():
    return GOLDEN


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    crit = next((m for m in getattr(report, "acceptance", ()) if m), None)
    if crit is not None:
        _acceptance.setdefault(crit, []).append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    rep.acceptance = (marker.args[0],) if marker else ()


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for crit, outcomes in _acceptance.items():
        ok = all(o == "passed" for o in outcomes)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {crit:<22} {len(outcomes)} test(s)")
