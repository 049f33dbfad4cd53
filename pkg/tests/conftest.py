import pytest

CRITERIA = {
    1: "lossless recovery matches plain FedAvg",
    2: "masked forward relations",
    3: "masked gradient identity and finite differences",
    4: "parameter ambiguity witnesses",
    5: "prediction guessing bound",
    6: "TCP transport matches in-proc",
    7: "deterministic metrics CSV",
    8: "order mutation is detected",
}

_outcomes: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test decides")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes.setdefault(marker.args[0], []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance")
    for n, name in CRITERIA.items():
        results = _outcomes.get(n)
        if results is None:
            continue
        status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE criterion {n}: {status} ({name}; {sum(results)}/{len(results)} tests)")
