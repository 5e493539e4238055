import pytest

_CRITERIA: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.fixture
def note(request):
    """Attach a short measurement to the criterion's summary line."""
    notes = _CRITERIA.setdefault(request.node.nodeid, {}).setdefault("notes", [])
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.skipped):
        return
    entry = _CRITERIA.setdefault(item.nodeid, {})
    entry.update(number=marker.args[0], title=marker.args[1], seconds=call.duration,
                 outcome="PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    rows = sorted((e for e in _CRITERIA.values() if "number" in e), key=lambda e: e["number"])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for e in rows:
        notes = "; ".join(e.get("notes", []))
        terminalreporter.write_line(f"{e['outcome']} criterion {e['number']}: {e['title']} "
                                    f"[{e['seconds']:.1f}s]" + (f" {notes}" if notes else ""))
