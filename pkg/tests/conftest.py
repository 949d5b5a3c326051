import numpy as np
import pytest

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance_report(request):
    """Record one ``PASS``/``FAIL`` line per acceptance criterion."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def report(number: int, passed: bool, text: str):
        line = f"{'PASS' if passed else 'FAIL'} {number}: {text}"
        lines.append(line)
        print(line)
        return passed
    return report
