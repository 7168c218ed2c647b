import pytest

RESULTS = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(RESULTS, [])

    def _report(number: int, ok: bool, detail: str, seconds: float, limit: float) -> None:
        within = seconds < limit
        status = "PASS" if ok and within else "FAIL"
        line = f"{status} criterion {number:2d}: {detail} [{seconds:.1f}s, limit {limit:g}s]"
        print(line)
        lines.append(line)
        assert ok, line
        assert within, line

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
