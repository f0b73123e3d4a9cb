"""Accuracy bookkeeping and the two summary metrics.

An AccuracyMatrix holds a[k][t][i]: the test accuracy of client k's task
i measured right after learning step t (defined for i <= t, 0-based),
plus the test-set size of each task. Average accuracy is the sample-
weighted mean of the final row; average forgetting is the sample-weighted
mean of peak-minus-final accuracy per task, with the last task excluded
and no clamping (a task that ends at its best contributes negatively).
"""

from __future__ import annotations

import numpy as np

from affcl.errors import IncompleteMatrixError


class AccuracyMatrix:
    """Lower-triangular accuracy record for one run."""

    def __init__(self, num_clients: int, num_tasks: int):
        self.num_clients = num_clients
        self.num_tasks = num_tasks
        self._acc = np.full((num_clients, num_tasks, num_tasks), np.nan)
        self._n = np.zeros((num_clients, num_tasks), dtype=np.int64)

    def record(self, client: int, step: int, task: int, accuracy: float) -> None:
        if task > step:
            raise ValueError(f"task {task} not yet learned at step {step}")
        if not 0.0 <= accuracy <= 1.0:
            raise ValueError(f"accuracy {accuracy} outside [0, 1]")
        self._acc[client, step, task] = accuracy

    def set_count(self, client: int, task: int, n: int) -> None:
        if n <= 0:
            raise ValueError("test-sample count must be positive")
        self._n[client, task] = n

    def accuracy(self, client: int, step: int, task: int) -> float:
        v = self._acc[client, step, task]
        if np.isnan(v):
            raise IncompleteMatrixError(
                f"no accuracy recorded for client {client}, step {step}, task {task}"
            )
        return float(v)

    def count(self, client: int, task: int) -> int:
        return int(self._n[client, task])

    # -- persistence ---------------------------------------------------

    def to_json(self) -> dict:
        entries = []
        ks, ts, is_ = np.nonzero(~np.isnan(self._acc))
        for k, t, i in zip(ks, ts, is_):
            entries.append([int(k), int(t), int(i), float(self._acc[k, t, i])])
        return {
            "num_clients": self.num_clients,
            "num_tasks": self.num_tasks,
            "entries": entries,
            "counts": self._n.tolist(),
        }

    @staticmethod
    def from_json(obj: dict) -> "AccuracyMatrix":
        m = AccuracyMatrix(obj["num_clients"], obj["num_tasks"])
        for k, t, i, a in obj["entries"]:
            m._acc[k, t, i] = a
        m._n = np.asarray(obj["counts"], dtype=np.int64)
        return m


def _require_final_row(m: AccuracyMatrix, tasks) -> None:
    last = m.num_tasks - 1
    for k in range(m.num_clients):
        for i in tasks:
            if np.isnan(m._acc[k, last, i]):
                raise IncompleteMatrixError(
                    f"final-row entry missing for client {k}, task {i}"
                )
            if m._n[k, i] <= 0:
                raise IncompleteMatrixError(
                    f"no test-sample count for client {k}, task {i}"
                )


def average_accuracy(m: AccuracyMatrix) -> float:
    """Sample-weighted mean accuracy over all tasks after the last step."""
    tasks = range(m.num_tasks)
    _require_final_row(m, tasks)
    last = m.num_tasks - 1
    num = den = 0.0
    for k in range(m.num_clients):
        for i in tasks:
            num += m._acc[k, last, i] * m._n[k, i]
            den += m._n[k, i]
    return float(num / den)


def average_forgetting(m: AccuracyMatrix, clamp: bool = False) -> float:
    """Sample-weighted mean of (peak - final) accuracy per task.

    The last task is excluded (it has no post-learning measurements).
    Negative contributions are kept unless `clamp` is set.
    """
    if m.num_tasks < 2:
        raise IncompleteMatrixError("forgetting needs at least two tasks")
    tasks = range(m.num_tasks - 1)
    _require_final_row(m, tasks)
    last = m.num_tasks - 1
    num = den = 0.0
    for k in range(m.num_clients):
        for i in tasks:
            history = m._acc[k, i:last, i]
            if np.all(np.isnan(history)):
                raise IncompleteMatrixError(
                    f"no pre-final accuracy for client {k}, task {i}"
                )
            peak = np.nanmax(history)
            gap = peak - m._acc[k, last, i]
            if clamp:
                gap = max(gap, 0.0)
            num += gap * m._n[k, i]
            den += m._n[k, i]
    return float(num / den)


def evaluate_clean_subset(m: AccuracyMatrix, clean_task_indices) -> float:
    """Average accuracy restricted to the given task indices (0-based)."""
    tasks = sorted(set(int(i) for i in clean_task_indices))
    if not tasks:
        raise ValueError("empty task-index set")
    if tasks[0] < 0 or tasks[-1] >= m.num_tasks:
        raise ValueError(f"task indices {tasks} outside 0..{m.num_tasks - 1}")
    _require_final_row(m, tasks)
    last = m.num_tasks - 1
    num = den = 0.0
    for k in range(m.num_clients):
        for i in tasks:
            num += m._acc[k, last, i] * m._n[k, i]
            den += m._n[k, i]
    return float(num / den)


def step_accuracy(m: AccuracyMatrix, step: int) -> float:
    """Sample-weighted accuracy over tasks 0..step measured at `step`."""
    num = den = 0.0
    for k in range(m.num_clients):
        for i in range(step + 1):
            v = m._acc[k, step, i]
            if np.isnan(v):
                raise IncompleteMatrixError(
                    f"entry missing for client {k}, step {step}, task {i}"
                )
            num += v * m._n[k, i]
            den += m._n[k, i]
    return float(num / den)
