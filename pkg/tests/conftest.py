import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_criteria = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        outcome = "PASS" if report.passed else "FAIL"
        _criteria.append((props["criterion"], outcome, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in sorted(_criteria, key=lambda c: c[0]):
        terminalreporter.write_line(f"{outcome} {name}" + (f": {detail}" if detail else ""))
