import pytest

# one line per acceptance criterion, filled by tests/test_acceptance.py
CRITERIA_LINES: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    line = f"{criterion} {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA_LINES.append(line)
    print(line)
    return ok


@pytest.fixture
def criterion():
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES):
            terminalreporter.write_line(line)
