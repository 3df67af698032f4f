"""Replays the acceptance verdict lines after the test summary.

Without this, `pytest` (no -s) captures the stdout of passing criteria and
only failing ones surface their `[criterion N]` line.
"""

import sys


def pytest_terminal_summary(terminalreporter):
    for name in ("tests.test_acceptance", "test_acceptance"):
        mod = sys.modules.get(name)
        if mod is not None and getattr(mod, "VERDICT_LINES", None):
            terminalreporter.section("criterion verdicts")
            for line in mod.VERDICT_LINES:
                terminalreporter.write_line(line)
            break
