import pytest

_RESULTS = {}


@pytest.fixture
def record_criterion():
    """Record a pass/fail line for an acceptance criterion, then assert it."""

    def record(name, ok, detail):
        _RESULTS[name] = (bool(ok), detail)
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_RESULTS, key=lambda k: (int(k.split()[1].rstrip("abcd")), k)):
        ok, detail = _RESULTS[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
