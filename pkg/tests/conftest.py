import pytest

_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def verdicts(request):
    """Shared list of one-line PASS/FAIL verdicts, echoed in the terminal summary."""
    return request.config.stash.setdefault(_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":").split("/")[0])):
            terminalreporter.write_line(line)
