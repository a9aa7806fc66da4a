import pytest

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k): acceptance criterion number")


@pytest.fixture
def record(request):
    """Record the verdict of the criterion the calling test is marked with."""
    k = request.node.get_closest_marker("criterion").args[0]

    def _record(ok: bool, detail: str):
        ACCEPTANCE[k] = (bool(ok), detail)
        return ok

    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    k = marker.args[0]
    if rep.failed and k not in ACCEPTANCE:
        ACCEPTANCE[k] = (False, f"error: {call.excinfo.typename}: {call.excinfo.value}".splitlines()[0])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
