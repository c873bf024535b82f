import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE, acceptance_lines
    if not ACCEPTANCE:
        return
    from test_acceptance import TITLES
    terminalreporter.section("acceptance criteria")
    for line in acceptance_lines(TITLES):
        terminalreporter.write_line(line)
