import pytest

# (criterion number, passed, detail) tuples filled in by test_acceptance.py
ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    def record(number, passed, detail, seconds=None):
        extra = f" [{seconds:.1f}s]" if seconds is not None else ""
        line = f"ACCEPTANCE {number:2d}: {'PASS' if passed else 'FAIL'} - {detail}{extra}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
