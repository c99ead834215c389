import pytest

ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line; all lines are printed in the terminal summary."""

    def _report(name, ok, detail):
        request.config.stash[ACCEPTANCE_LINES].append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return ok

    return _report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
