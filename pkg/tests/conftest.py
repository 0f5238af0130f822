import pytest

_acceptance: list[tuple[str, str, float]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    if "acceptance" not in report.keywords:
        return
    outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
    doc = report.user_properties and dict(report.user_properties).get("criterion")
    _acceptance.append((doc or report.nodeid, outcome, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, secs in _acceptance:
        terminalreporter.write_line(f"{outcome}  {name}  ({secs:.1f}s)")


@pytest.fixture
def criterion(record_property):
    def declare(text):
        record_property("criterion", text)
    return declare
