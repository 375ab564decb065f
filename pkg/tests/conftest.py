import pytest

# (number, title, passed, detail) rows filled in by test_acceptance.py
CRITERIA: list = []


@pytest.fixture
def criterion():
    def record(number, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}  {detail}".rstrip()
        CRITERIA.append((number, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(CRITERIA):
        terminalreporter.write_line(line)
