import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stratma.core import Mode, PopulationTable, StrataAssignment  # noqa: E402

_ACCEPTANCE: list[str] = []

# Two fixed populations with both potential outcomes and both potential surrogates.
SMALL = {
    "y0": [-1.6, -2.65, -0.5, 0.84, 2.27, 0.22, -1.11, -1.57],
    "y1": [0.15, -0.02, 0.77, 0.61, 2.31, 2.82, 0.09, -2.3],
    "yh0": [-1.18, -3.31, -0.63, 0.85, 2.06, 1.27, -0.67, -1.66],
    "yh1": [0.06, 0.31, -1.37, -0.15, 0.83, 2.15, -1.7, -2.78],
}
MEDIUM = {
    "y0": [-0.08, -0.61, -2.1, -0.79, -2.18, -2.71, 0.45, -2.22, 2.34, 1.43, -4.0, 0.54],
    "y1": [-0.18, 0.42, -1.06, -1.78, -1.41, -1.97, 2.41, -2.4, 4.08, 1.33, -3.33, 0.7],
    "yh0": [1.87, 0.46, 0.83, 0.35, -0.84, -1.37, 0.34, -1.79, 4.19, 1.53, -3.31, 1.02],
    "yh1": [-0.07, -0.44, -1.71, -2.04, -1.81, -3.33, 2.81, -4.2, 2.38, -0.45, -2.86, -0.16],
}


@pytest.fixture
def accept():
    """Record a one-line acceptance verdict, printed in the terminal summary."""

    def record(name: str, ok: bool, detail: str) -> None:
        _ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


def make_table(n_per_arm=40, K=4, seed=0, coded_fraction=1.0, two_arm=True):
    """Small synthetic table with strata from surrogate rank."""
    rng = np.random.default_rng(seed)
    arms = (0, 1) if two_arm else (0,)
    N = n_per_arm * len(arms)
    arm = np.repeat(arms, n_per_arm)
    y_hat = rng.normal(0, 1, N)
    y = y_hat + 0.3 * arm + rng.normal(0.2, 0.5, N)
    if coded_fraction < 1:
        y = np.where(rng.random(N) < coded_fraction, y, np.nan)
    labels = np.zeros(N, dtype=int)
    for z in arms:
        idx = np.flatnonzero(arm == z)
        order = idx[np.argsort(y_hat[idx], kind="stable")]
        labels[order] = np.arange(len(idx)) * K // len(idx) + 1
    pop = PopulationTable(
        ids=[f"u{i:03d}" for i in range(N)], y_hat=y_hat, arm=arm, y=y, stratum=labels,
        mode=Mode.TWO_ARM if two_arm else Mode.SINGLE_ARM,
    )
    return pop, StrataAssignment(labels, arm)


@pytest.fixture
def table():
    return make_table()
