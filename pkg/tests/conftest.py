import pytest

_ACCEPTANCE: list = []


@pytest.fixture
def report():
    """Record one acceptance line: ``report("3a", ok, "detail")``."""
    def _report(criterion, ok, detail=""):
        _ACCEPTANCE.append((str(criterion), bool(ok), detail))
        print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(_ACCEPTANCE, key=lambda r: (int("".join(c for c in r[0] if c.isdigit())), r[0])):
        terminalreporter.write_line(f"criterion {crit:<4} {'PASS' if ok else 'FAIL'}  {detail}")
