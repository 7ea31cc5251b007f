import pytest

_RESULTS = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion, then assert it."""
    def record(number, title, ok, detail):
        _RESULTS[number] = (title, bool(ok), detail)
        assert ok, f"criterion {number} ({title}): {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok, detail = _RESULTS[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail}")
