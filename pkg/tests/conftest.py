"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line per criterion."""

import pytest

N_CRITERIA = 11
_results: dict[int, dict] = {}


@pytest.fixture
def detail(request):
    """Call ``detail("...")`` inside an acceptance test to attach measured values to its summary line."""

    def add(text: str) -> None:
        request.node.user_properties.append(("detail", text))

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    n, title = marker.args
    entry = _results.setdefault(n, {"title": title, "status": "PASS", "detail": []})
    if rep.failed:
        entry["status"] = "FAIL"
        if rep.when != "call":
            entry["detail"].append(f"{rep.when} error")
    elif rep.skipped and entry["status"] == "PASS":
        entry["status"] = "SKIP"
    if rep.when == "teardown":
        entry["detail"] = [v for k, v in item.user_properties if k == "detail"] + entry["detail"]


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        e = _results.get(n)
        if e is None:
            tr.write_line(f"[{n:2d}] NOT RUN")
            continue
        extra = f" | {'; '.join(e['detail'])}" if e["detail"] else ""
        tr.write_line(f"[{n:2d}] {e['status']}  {e['title']}{extra}")
