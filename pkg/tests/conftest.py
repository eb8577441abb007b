import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from _criteria import RESULTS  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiment")


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
