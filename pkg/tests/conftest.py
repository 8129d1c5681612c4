import pytest

# one (ok, name, detail) entry per acceptance criterion, printed after the run
ACCEPTANCE = []


@pytest.fixture
def record():
    def _record(name, ok, detail=""):
        ACCEPTANCE.append((bool(ok), name, detail))
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for ok, name, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
