"""Prints one PASS/FAIL line per acceptance criterion in the terminal summary.

Each criterion test in test_acceptance.py registers a measurement string
(value vs. tolerance) in CRITERION_DETAILS; the hook below pairs those with
the test outcomes so the summary is readable even when output is captured.
"""
import re
import sys

_CRITERION = re.compile(r"test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    details = getattr(mod, "CRITERION_DETAILS", {}) if mod else {}

    rows = {}
    for key, status in (("passed", "PASS"), ("failed", "FAIL"),
                        ("error", "FAIL (setup error)")):
        for rep in terminalreporter.stats.get(key, []):
            m = _CRITERION.search(rep.nodeid)
            if m:
                rows[int(m.group(1))] = status
    if not rows:
        return

    terminalreporter.section("acceptance criteria")
    for num in sorted(rows):
        detail = details.get(num, "see failure detail above")
        terminalreporter.write_line(
            f"criterion {num:02d} {rows[num]} — {detail}")
