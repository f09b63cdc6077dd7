import pytest

_REPORT = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_REPORT] = []


@pytest.fixture
def acceptance_report(request):
    """Append lines to the acceptance summary printed at the end of the run."""
    lines = request.config.stash[_REPORT]

    def add(*text):
        for t in text:
            print(t)
            lines.append(t)

    return add


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_REPORT, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
