import re

_AC = re.compile(r"test_ac(\d+)_")
_results = {}


def pytest_runtest_logreport(report):
    match = _AC.match(report.nodeid.split("::")[-1])
    if not match:
        return
    if report.when == "call" or report.failed:
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
        number = int(match.group(1))
        ok = report.passed and _results.get(number, (True,))[0]
        _results[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        ok, detail = _results[number]
        line = f"AC-{number} {'PASS' if ok else 'FAIL'}"
        terminalreporter.write_line(f"{line}  {detail}" if detail else line)
