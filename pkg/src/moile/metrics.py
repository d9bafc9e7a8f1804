"""Average accuracy and forgetting over a lower-triangular accuracy matrix.

Row ``i`` (0-based) holds the accuracy on tasks ``0..i`` after training
task ``i``.
"""
from __future__ import annotations

import numpy as np

from .numcore import ContractError


class AccuracyMatrix:
    def __init__(self, rows):
        self.rows = [list(map(float, r)) for r in rows]
        for i, r in enumerate(self.rows):
            if len(r) != i + 1:
                raise ContractError(f"row {i + 1} must hold {i + 1} entries, has {len(r)}")
            if any(not 0.0 <= a <= 1.0 for a in r):
                raise ContractError(f"row {i + 1} has an accuracy outside [0, 1]")

    @property
    def T(self) -> int:
        return len(self.rows)

    def __getitem__(self, it):
        i, t = it
        return self.rows[i][t]

    def dense(self) -> np.ndarray:
        out = np.full((self.T, self.T), np.nan)
        for i, r in enumerate(self.rows):
            out[i, : len(r)] = r
        return out


def _as_matrix(m) -> AccuracyMatrix:
    return m if isinstance(m, AccuracyMatrix) else AccuracyMatrix(m)


def average_accuracy(m) -> float:
    """Mean of the final row."""
    m = _as_matrix(m)
    if m.T == 0:
        raise ContractError("accuracy matrix has no rows")
    # left-to-right sums so results are reproducible term for term
    return sum(m.rows[-1]) / m.T


def forgetting_per_task(m) -> list[float]:
    """Peak-minus-final drop for every task but the last. Peaks range over
    rows that exist for the task (trained at or after it, before the last)."""
    m = _as_matrix(m)
    T = m.T
    final = m.rows[-1]
    return [max(m.rows[i][t] for i in range(t, T - 1)) - final[t] for t in range(T - 1)]


def forgetting_measure(m) -> float:
    """Mean forgetting over tasks ``1..T-1``; 0 for a single task. Negative
    drops (backward transfer) are kept as they are."""
    m = _as_matrix(m)
    if m.T == 0:
        raise ContractError("accuracy matrix has no rows")
    if m.T == 1:
        return 0.0
    return sum(forgetting_per_task(m)) / (m.T - 1)
