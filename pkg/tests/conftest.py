import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> "[PASS]/[FAIL] ..." line, filled by test_acceptance
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
