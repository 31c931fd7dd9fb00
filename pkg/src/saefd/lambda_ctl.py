"""Adaptive distillation weight: target-ratio ideal value, clipped and EMA-smoothed."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

LOSS_EPS = 1e-8


@dataclass(frozen=True)
class TraceRow:
    step: int
    task_id: int
    lam: float
    L_task: float
    L_fd: float


@dataclass
class LambdaState:
    lam: float = 10.0
    rho: float = 0.15
    ema_alpha: float = 0.05
    lambda_min: float = 0.2
    lambda_max: float = 10.0
    trace: list[TraceRow] = field(default_factory=list)

    def __post_init__(self):
        _check_rho(self.rho)
        if not 0.0 < self.ema_alpha <= 1.0:
            raise ValueError(f"ema_alpha must lie in (0, 1], got {self.ema_alpha}")
        if not 0.0 < self.lambda_min <= self.lambda_max:
            raise ValueError("need 0 < lambda_min <= lambda_max")

    def clip(self, value: float) -> float:
        return min(max(value, self.lambda_min), self.lambda_max)

    def log(self, step: int, task_id: int, L_task: float, L_fd: float) -> None:
        if self.trace and step <= self.trace[-1].step:
            raise ValueError(f"trace steps must increase ({step} after {self.trace[-1].step})")
        self.trace.append(TraceRow(step, task_id, self.lam, float(L_task), float(L_fd)))


def _check_rho(rho: float) -> None:
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")


def ideal_lambda(rho: float, L_task: float, L_fd: float) -> float:
    """The weight at which ``lam * L_fd`` is a fraction ``rho`` of ``L_task + lam * L_fd``."""
    _check_rho(rho)
    return rho / (1.0 - rho) * float(L_task) / max(float(L_fd), LOSS_EPS)


def update(state: LambdaState, L_task: float, L_fd: float, step: int, task_id: int = 0) -> LambdaState:
    """EMA-blend towards the clipped ideal weight, log the result and return ``state``.

    ``state`` is updated in place.
    """
    target = state.clip(ideal_lambda(state.rho, L_task, L_fd))
    state.lam = (1.0 - state.ema_alpha) * state.lam + state.ema_alpha * target
    state.log(step, task_id, L_task, L_fd)
    return state


def write_trace_csv(trace: list[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "task_id", "lambda", "L_task", "L_FD"])
        for row in trace:
            writer.writerow([row.step, row.task_id, repr(row.lam), repr(row.L_task), repr(row.L_fd)])


def read_trace_csv(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        return [TraceRow(int(r["step"]), int(r["task_id"]), float(r["lambda"]), float(r["L_task"]),
                         float(r["L_FD"])) for r in csv.DictReader(fh)]


def start_end_per_task(trace: list[TraceRow]) -> list[tuple[int, float, float]]:
    """(task_id, lambda at first logged step, lambda at last logged step) per task."""
    out: dict[int, list[float]] = {}
    for row in trace:
        if row.task_id not in out:
            out[row.task_id] = [row.lam, row.lam]
        out[row.task_id][1] = row.lam
    return [(t, s, e) for t, (s, e) in out.items()]
