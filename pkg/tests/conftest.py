import pytest

_LINES: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for the terminal summary, then return the flag."""
    def record(name: str, passed: bool, detail: str = "") -> bool:
        _LINES[name] = (bool(passed), detail)
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_LINES):
        passed, detail = _LINES[name]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
