import pytest

_LINES = {}


@pytest.fixture
def report():
    """``report(key, ok, detail)`` records one acceptance line."""
    def _report(key, ok, detail=""):
        _LINES[key] = f"{key}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_LINES, key=lambda k: int(k.split()[1])):
        terminalreporter.write_line(_LINES[key])
