import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = {}
CRITERIA_NAMES = {
    1: "gradient correctness",
    2: "architecture fidelity",
    3: "loss oracles",
    4: "ordering reproduction",
    5: "separation reproduction",
    6: "rejection reproduction",
    7: "determinism",
    8: "protocol integrity",
}


@pytest.fixture
def criterion():
    """Record one acceptance criterion's verdict; printed again in the terminal summary."""

    def record(number: int, passed: bool, detail: str = "") -> bool:
        line = f"criterion {number} ({CRITERIA_NAMES[number]}): {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        _CRITERIA[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    ran = {rep.nodeid for reps in terminalreporter.stats.values() for rep in reps
           if getattr(rep, "when", None) == "call" and "test_acceptance" in rep.nodeid}
    if not ran:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(CRITERIA_NAMES):
        if n in _CRITERIA:
            terminalreporter.write_line(_CRITERIA[n])
        elif any(f"test_criterion_{n}_" in nid for nid in ran):
            terminalreporter.write_line(f"criterion {n} ({CRITERIA_NAMES[n]}): FAIL  did not complete")
