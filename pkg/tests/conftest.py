import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gse.numkit import RngStream, gaussian_matrix

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


def seeded(rows, cols, seed=0, stream=0, std=1.0):
    return gaussian_matrix(rows, cols, std, RngStream(seed, stream))


@pytest.fixture
def diag4321():
    return np.diag([4.0, 3.0, 2.0, 1.0])


# (criterion, clause, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE_ROWS = []


def record_criterion(number, clause, passed, detail):
    ACCEPTANCE_ROWS.append((number, clause, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_ROWS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    by_number = {}
    for number, clause, passed, detail in ACCEPTANCE_ROWS:
        by_number.setdefault(number, []).append((clause, passed, detail))
    for number in sorted(by_number):
        rows = by_number[number]
        ok = all(p for _, p, _ in rows)
        tr.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}")
        for clause, passed, detail in rows:
            tr.write_line(f"    [{'pass' if passed else 'FAIL'}] {clause}: {detail}")
