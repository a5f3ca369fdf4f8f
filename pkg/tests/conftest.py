import pytest

_LINES = []


@pytest.fixture
def verdict():
    """Record one ``<id>: PASS|FAIL detail`` line, shown in the terminal summary."""
    def record(criterion, ok, detail=""):
        line = f"{criterion}: {'PASS' if ok else 'FAIL'}" + (f"  {detail}" if detail else "")
        _LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split(":")[0][1:])):
            terminalreporter.write_line(line)
