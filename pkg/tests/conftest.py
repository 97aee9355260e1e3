import pytest

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record a pass/fail line for an acceptance criterion: ``criterion(n, ok, detail)``."""

    def record(number, ok, detail=""):
        _CRITERIA[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
