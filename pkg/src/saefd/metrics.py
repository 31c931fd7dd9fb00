"""Average accuracy and backward transfer over a lower-triangular accuracy matrix."""

from __future__ import annotations

import numpy as np


class AccuracyMatrix:
    """``rows[i-1][t-1]`` holds a_{i,t}, the score on task t after training through task i.

    Scores are fractions in [0, 1]; CSV exports are percentages.
    """

    def __init__(self, rows=None):
        self.rows: list[list[float]] = []
        for row in rows or []:
            self.add_row(row)

    @property
    def T(self) -> int:
        return len(self.rows)

    def add_row(self, row) -> None:
        row = [float(v) for v in row]
        if len(row) != len(self.rows) + 1:
            raise ValueError(f"row {len(self.rows) + 1} must have {len(self.rows) + 1} entries, got {len(row)}")
        if any(not (0.0 <= v <= 1.0) or np.isnan(v) for v in row):
            raise ValueError(f"scores must lie in [0, 1]: {row}")
        self.rows.append(row)

    def final_row(self) -> list[float]:
        if not self.rows:
            raise ValueError("empty accuracy matrix")
        return self.rows[-1]

    def diagonal(self) -> list[float]:
        return [self.rows[t][t] for t in range(self.T)]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.rows:
                fh.write(",".join(f"{100.0 * v:.2f}" for v in row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "AccuracyMatrix":
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        return cls([[float(x) / 100.0 for x in ln.split(",")] for ln in lines])


def _validate(M: AccuracyMatrix, min_tasks: int = 1) -> None:
    if M.T < min_tasks:
        raise ValueError(f"need at least {min_tasks} task(s), got {M.T}")
    for i, row in enumerate(M.rows):
        if len(row) != i + 1:
            raise ValueError(f"row {i + 1} is incomplete")


def average_accuracy(M: AccuracyMatrix) -> float:
    _validate(M)
    return float(np.mean(M.final_row()))


def per_task_bwt(M: AccuracyMatrix) -> list[float]:
    """``a[T][t] - a[t][t]`` for t = 1..T-1."""
    _validate(M, min_tasks=2)
    final = M.final_row()
    return [final[t] - M.rows[t][t] for t in range(M.T - 1)]


def backward_transfer(M: AccuracyMatrix) -> float:
    return float(np.mean(per_task_bwt(M)))


def drops(M: AccuracyMatrix) -> list[float]:
    """Final minus peak (diagonal) score for every task, the last one included."""
    _validate(M)
    final = M.final_row()
    return [final[t] - M.rows[t][t] for t in range(M.T)]
