import pytest

_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for the acceptance summary."""
    def record(number, passed, detail, informational=False):
        tag = "INFO" if informational else ("PASS" if passed else "FAIL")
        line = f"criterion {number:>2}: {tag}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
