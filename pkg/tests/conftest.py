import re

import numpy as np
import pytest


@pytest.fixture(autouse=True)
def _fixed_numpy_printoptions():
    with np.printoptions(precision=10, suppress=False):
        yield


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One explicit pass/fail line per acceptance criterion."""
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", nodeid)
            if m:
                verdict = "PASS" if outcome == "passed" else "FAIL"
                lines[int(m.group(1))] = (verdict, nodeid.split("::")[-1])
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for num in sorted(lines):
            verdict, name = lines[num]
            terminalreporter.write_line(f"CRITERION {num:2d}: {verdict}  ({name})")
