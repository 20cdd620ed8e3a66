"""Incremental-learning metrics over an accuracy matrix.

Accuracies are stored as exact ``(correct, total)`` counts. Every metric is
computed with :class:`fractions.Fraction` and only turned into a float on
the way out, so two runs with identical predictions give bit-identical
numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

__all__ = [
    "AccuracyMatrix",
    "avg_accuracy",
    "forgetting_measure",
    "last_accuracy",
    "sparsity_report",
]

Count = tuple[int, int]


def _frac(c: Count) -> Fraction:
    correct, total = c
    return Fraction(correct, total) if total else Fraction(0)


@dataclass
class AccuracyMatrix:
    """Lower-triangular per-round accuracies.

    ``per_task[k][j]`` holds the counts on round-j test samples measured after
    round k (0-based, ``j <= k``); ``overall[k]`` holds the counts over the
    union of all rounds seen so far.
    """

    per_task: list[list[Count]] = field(default_factory=list)
    overall: list[Count] = field(default_factory=list)

    @property
    def rounds(self) -> int:
        return len(self.overall)

    def append_row(self, row: Sequence[Count], overall: Count | None = None) -> None:
        k = self.rounds
        if len(row) != k + 1:
            raise ValueError(f"row {k} must have {k + 1} entries, got {len(row)}")
        for correct, total in row:
            if not 0 <= correct <= total:
                raise ValueError(f"invalid count ({correct}, {total})")
        if overall is None:
            overall = (sum(c for c, _ in row), sum(t for _, t in row))
        self.per_task.append([tuple(c) for c in row])
        self.overall.append(tuple(overall))

    def a(self, k: int, j: int) -> float:
        """Accuracy on round-j classes after round k (0-based)."""
        if j > k:
            raise IndexError(f"a[{k}][{j}] is undefined: round {j} has not been learned after round {k}")
        return float(_frac(self.per_task[k][j]))

    def o(self, k: int) -> float:
        return float(_frac(self.overall[k]))

    def as_floats(self) -> list[list[float]]:
        return [[float(_frac(c)) for c in row] for row in self.per_task]

    def to_dict(self) -> dict:
        return {
            "per_task": [[list(c) for c in row] for row in self.per_task],
            "overall": [list(c) for c in self.overall],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AccuracyMatrix":
        m = cls()
        for row, overall in zip(d["per_task"], d["overall"]):
            m.append_row([tuple(c) for c in row], tuple(overall))
        return m

    @classmethod
    def from_floats(cls, rows: Sequence[Sequence[float]], overall: Sequence[float] | None = None) -> "AccuracyMatrix":
        """Build from real-valued accuracies (denominator 10**6); handy for hand examples."""
        scale = 10**6
        m = cls()
        for k, row in enumerate(rows):
            counts = [(round(v * scale), scale) for v in row]
            o = None if overall is None else (round(overall[k] * scale), scale)
            m.append_row(counts, o)
        return m

    def __eq__(self, other):
        if not isinstance(other, AccuracyMatrix):
            return NotImplemented
        return self.per_task == other.per_task and self.overall == other.overall


def avg_accuracy(m: AccuracyMatrix) -> float:
    """Mean of the overall accuracy across all rounds."""
    if m.rounds < 1:
        raise ValueError("accuracy matrix is empty")
    return float(sum((_frac(c) for c in m.overall), Fraction(0)) / m.rounds)


def last_accuracy(m: AccuracyMatrix) -> float:
    if m.rounds < 1:
        raise ValueError("accuracy matrix is empty")
    return float(_frac(m.overall[-1]))


def forgetting_measure(m: AccuracyMatrix, k: int | None = None) -> float:
    """Average forgetting after round ``k`` (1-based; defaults to the last round).

    For each earlier round j the drop from its best accuracy since it was
    learned to its accuracy after round k is taken, then averaged over the
    k - 1 earlier rounds. The running max includes round k itself, so a task
    that is better than ever at round k contributes 0 rather than a negative
    amount.
    """
    if k is None:
        k = m.rounds
    if k < 2:
        raise ValueError(f"forgetting needs at least two rounds, got k={k}")
    if k > m.rounds:
        raise ValueError(f"round {k} not available; matrix has {m.rounds} rounds")
    total = Fraction(0)
    for j in range(k - 1):  # 0-based task index
        best = max(_frac(m.per_task[l][j]) for l in range(j, k))
        total += best - _frac(m.per_task[k - 1][j])
    return float(total / (k - 1))


def sparsity_report(samples: Sequence[Sequence[float]]) -> list[dict[str, float]]:
    """Mean and (population) std of per-block mask sparsity.

    ``samples`` is one sequence of per-block sparsities per test sample.
    """
    if not samples:
        return []
    n_blocks = len(samples[0])
    report = []
    for b in range(n_blocks):
        values = [s[b] for s in samples]
        mean = math.fsum(values) / len(values)
        var = math.fsum((v - mean) ** 2 for v in values) / len(values)
        report.append({"mean": mean, "std": math.sqrt(var)})
    return report
