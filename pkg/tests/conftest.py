import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, {"title": title, "passed": True, "seen": False})
    if rep.when == "call" or rep.failed:
        entry["seen"] = True
        entry["passed"] = entry["passed"] and rep.passed
        entry["detail"] = getattr(item, "acceptance_detail", "")


@pytest.fixture
def record(request):
    """Attach a one-line measurement summary to the acceptance report."""
    def _record(text):
        request.node.acceptance_detail = text
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        if not e["seen"]:
            continue
        status = "PASS" if e["passed"] else "FAIL"
        detail = f" ({e['detail']})" if e.get("detail") else ""
        terminalreporter.write_line(f"criterion {n}: {status} - {e['title']}{detail}")
