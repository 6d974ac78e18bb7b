import os
import re
import sys

sys.path.insert(0, os.path.dirname(__file__))

CRITERIA = {
    1: "zero-init identity",
    2: "gradient suite",
    3: "oracle equivalence",
    4: "integration correctness",
    5: "geometry suite",
    6: "desk end-to-end",
    7: "test-retest consistency",
    8: "pipeline determinism",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    status = {}
    for outcome, ok in (("passed", True), ("failed", False),
                        ("error", False)):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            m = re.search(r"test_criterion_(\d+)", nodeid)
            if m:
                num = int(m.group(1))
                status[num] = status.get(num, True) and ok
    if not status:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(status):
        verdict = "PASS" if status[num] else "FAIL"
        terminalreporter.write_line(
            f"criterion {num} ({CRITERIA.get(num, '?')}): {verdict}")
