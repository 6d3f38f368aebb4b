import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "passed": True, "detail": "", "ran": False})
    if call.excinfo is not None:
        entry["passed"] = False
        entry["detail"] = str(call.excinfo.value).splitlines()[0][:160] if str(call.excinfo.value) else \
            call.excinfo.typename
    if call.when == "call":
        entry["ran"] = True
        detail = dict(item.user_properties).get("detail")
        if detail and entry["passed"]:
            entry["detail"] = detail


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "PASS" if e["passed"] and e["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {e['title']}  [{e['detail']}]")
