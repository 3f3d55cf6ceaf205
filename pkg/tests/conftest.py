"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

import pytest

_RESULTS: dict[int, tuple[str, str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")
    config.addinivalue_line("markers", "slow: runs the full toy experiment")


@pytest.fixture
def note(request):
    """``note(text)`` attaches measured values to the criterion's summary line."""

    def add(text: str) -> None:
        request.node.user_properties.append(("note", text))
        print(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = mark.args
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        notes = [v for k, v in item.user_properties if k == "note"]
        # several tests may share a criterion: any failure fails it
        if number in _RESULTS:
            prev_status, _, prev_notes = _RESULTS[number]
            status = "FAIL" if "FAIL" in (status, prev_status) else status
            notes = prev_notes + notes
        _RESULTS[number] = (status, title, notes)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        status, title, notes = _RESULTS[number]
        line = f"criterion {number:>2}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{'; '.join(notes)}]" if notes else ""))
