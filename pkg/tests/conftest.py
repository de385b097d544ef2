import math

import numpy as np
import pytest


def within_se(samples, target, k=3.0):
    """True if the sample mean is within k standard errors of target."""
    x = np.asarray(samples, dtype=float)
    se = x.std(ddof=1) / math.sqrt(len(x))
    return abs(x.mean() - target) <= k * se


def variance_within_se(samples, target, k=3.0):
    """True if the sample variance is within k standard errors of target."""
    x = np.asarray(samples, dtype=float)
    dev2 = (x - x.mean()) ** 2
    se = dev2.std(ddof=1) / math.sqrt(len(x))
    return abs(x.var(ddof=1) - target) <= k * se


@pytest.fixture
def unit():
    from clusterchain import Window
    return Window.unit()


# -- acceptance report ---------------------------------------------------------------

ACCEPTANCE_DETAILS: dict[int, str] = {}


@pytest.fixture
def record():
    """Store a one-line summary for an acceptance criterion."""

    def _record(number: int, detail: str):
        ACCEPTANCE_DETAILS[number] = detail
        print(f"criterion {number}: {detail}")

    return _record


def pytest_terminal_summary(terminalreporter):
    outcomes = {}
    for status in ("passed", "failed", "error", "xfailed"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            number = int(nodeid.split("test_criterion_")[1].split("_")[0])
            if status != "passed" or getattr(rep, "when", "call") == "call":
                if outcomes.get(number) != "FAIL":
                    outcomes[number] = "PASS" if status == "passed" else "FAIL"
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(outcomes):
        detail = ACCEPTANCE_DETAILS.get(number, "no result recorded")
        terminalreporter.write_line(f"criterion {number:2d}: {outcomes[number]}  {detail}")
