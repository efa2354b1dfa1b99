from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError


@dataclass(frozen=True)
class FoldAssignment:
    """Student-level partition into ``k`` folds."""

    k: int
    folds: dict  # student id -> fold index

    def fold_of(self, students) -> np.ndarray:
        return np.array([self.folds[int(s)] for s in students], dtype=np.int64)

    def students_in(self, fold: int) -> list[int]:
        return sorted(s for s, f in self.folds.items() if f == fold)

    def test_indices(self, students, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of(students) == fold)

    def splits(self, students):
        """(train_idx, test_idx) per fold over a per-sample student array."""
        sample_fold = self.fold_of(students)
        for f in range(self.k):
            yield np.flatnonzero(sample_fold != f), np.flatnonzero(sample_fold == f)


def _imbalance(class_counts, totals):
    """Mean over present classes of the across-fold std of each class share."""
    present = totals > 0
    shares = class_counts[:, present] / totals[present]
    return float(shares.std(axis=0).mean())


def stratified_group_kfold(students, labels, k: int, seed: int = 0) -> FoldAssignment:
    """Greedy stratified student-level k-fold assignment.

    Students are visited largest first (ties in sample count ordered by a
    seeded shuffle). Each goes to the fold that minimises the spread of
    per-class sample shares across folds; ties prefer the fold with fewer
    samples, then the lower index. Once the number of unvisited students
    equals the number of empty folds, only empty folds are eligible, so no
    fold is left empty.
    """
    students = np.asarray(students)
    labels = np.asarray(labels).astype(np.int64)
    if students.shape != labels.shape:
        raise ValueError("students and labels must align")
    if k < 2:
        raise ValueError("k must be at least 2")
    uniq, inverse = np.unique(students, return_inverse=True)
    n_students = len(uniq)
    if n_students < k:
        raise DataError(f"{n_students} students cannot fill {k} folds")

    counts = np.zeros((n_students, 2), dtype=np.int64)
    np.add.at(counts, (inverse, labels), 1)
    totals = counts.sum(axis=0).astype(np.float64)

    rng = np.random.default_rng(seed)
    shuffled = rng.permutation(n_students)
    sizes = counts.sum(axis=1)
    visit = shuffled[np.argsort(-sizes[shuffled], kind="stable")]

    fold_counts = np.zeros((k, 2), dtype=np.float64)
    fold_students = np.zeros(k, dtype=np.int64)
    assignment = np.empty(n_students, dtype=np.int64)
    eye = np.eye(k)

    for remaining, s in zip(range(n_students, 0, -1), visit):
        empty = np.flatnonzero(fold_students == 0)
        candidates = empty if len(empty) >= remaining else np.arange(k)
        best = None
        for j in candidates:
            trial = fold_counts + eye[j][:, None] * counts[s]
            key = (_imbalance(trial, totals), fold_counts[j].sum(), j)
            if best is None or key < best:
                best = key
        j = best[2]
        assignment[s] = j
        fold_counts[j] += counts[s]
        fold_students[j] += 1

    return FoldAssignment(k, {int(uniq[i]): int(assignment[i]) for i in range(n_students)})
