import pytest

# criterion number -> (PASS/FAIL, summary), filled in by test_acceptance
ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(number, ok, summary):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} - {summary}"
        ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
