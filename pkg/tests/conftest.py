from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from causalseg import CateTable, SegmentCateEstimate
from causalseg.cate import normal_ci

FIXTURES = Path(__file__).parent / "fixtures"


def make_table(rows, alpha=0.05, columns=("num_devices", "is_p2plus")) -> CateTable:
    """CateTable from (segment, proportion, cate, se) rows, with normal CIs."""
    estimates = []
    for segment, proportion, cate, se in rows:
        lo, hi = normal_ci(cate, se, alpha)
        estimates.append(SegmentCateEstimate(segment=tuple(segment), n_v=max(2, round(5000 * proportion)),
                                             proportion=proportion, cate=cate, se=se, ci_lower=lo, ci_upper=hi))
    return CateTable(estimates=tuple(estimates), alpha=alpha, z=float(np.abs(normal_ci(0, 1, alpha)[0])),
                     columns=columns)


@pytest.fixture
def table2_frame() -> pd.DataFrame:
    return pd.read_csv(FIXTURES / "table2.csv")


@pytest.fixture
def table2(table2_frame) -> CateTable:
    rows = [((int(r.num_devices), int(r.is_p2plus)), r.proportion, r.cate, r.se)
            for r in table2_frame.itertuples()]
    return make_table(rows)


# One line per acceptance criterion, filled in by test_acceptance.py.
ACCEPTANCE: dict = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
