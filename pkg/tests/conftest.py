import pytest

TITLES = {
    1: "prior algebra",
    2: "gradient correctness",
    3: "architecture invariants",
    4: "loss identities",
    5: "oracle consistency",
    6: "oracle non-identifiability",
    7: "KL equivalence",
    8: "end-to-end estimation quality",
    9: "calibration",
    10: "Qini correctness",
    11: "retrieval windowing",
    12: "determinism",
}

_results: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    if report.failed:
        status = "FAIL"
    elif report.skipped:
        status = "SKIP"
    elif report.when == "call":
        status = "PASS"
    else:
        return
    prev = _results.get(marker, "PASS")
    _results[marker] = "FAIL" if "FAIL" in (prev, status) else "SKIP" if "SKIP" in (prev, status) else "PASS"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        report.criterion = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        terminalreporter.write_line(f"criterion {n:2d} {_results[n]}  {TITLES[n]}")
