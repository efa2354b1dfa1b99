"""Grid search, student-level cross-validation and backward feature
selection."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .._seeding import derive_seed
from ..eventlog import format_id
from ..features import Dataset, Scaler, fit_scaler
from ..models import Family, ModelSpec, expand_grid, train
from .metrics import UndefinedMetricError, auc_roc, weighted_f1
from .splits import FoldAssignment, stratified_group_kfold

log = logging.getLogger(__name__)

F1_THRESHOLD = 0.5
INNER_FOLDS = 3


def _auc_or_nan(scores, labels):
    try:
        return auc_roc(scores, labels)
    except UndefinedMetricError:
        return float("nan")


def grid_search(family, grid, X, y, students, seed: int = 0, inner_k: int = INNER_FOLDS, workers: int = 1) -> dict:
    """Pick the grid point with the best mean inner-CV AUC.

    Only the rows passed in are used: an inner student-level split of the
    training portion. Ties (and an all-undefined AUC) resolve to the earliest
    grid point. A singleton grid is returned without evaluation.
    """
    points = expand_grid(grid)
    if not points:
        raise ValueError("empty hyperparameter grid")
    if len(points) == 1:
        return dict(points[0])
    students = np.asarray(students)
    n_students = len(np.unique(students))
    k = min(inner_k, n_students)
    if k < 2:
        return dict(points[0])
    inner = stratified_group_kfold(students, y, k, derive_seed(seed, "inner-folds"))
    splits = list(inner.splits(students))

    best_score = -math.inf
    best = points[0]
    for i, params in enumerate(points):
        aucs = []
        for tr, te in splits:
            spec = ModelSpec(family, params, derive_seed(seed, "inner-model", i))
            model = train(spec, X[tr], y[tr], workers=workers)
            aucs.append(_auc_or_nan(model.predict_proba(X[te]), y[te]))
        aucs = [a for a in aucs if not math.isnan(a)]
        score = float(np.mean(aucs)) if aucs else -math.inf
        if score > best_score:
            best_score = score
            best = params
    return dict(best)


@dataclass
class FoldResult:
    fold: int
    test_index: np.ndarray
    probability: np.ndarray
    hyperparameters: dict
    scaler: Scaler
    auc: float
    f1: float


@dataclass
class CVResult:
    family: Family
    k: int
    seed: int
    assignment: FoldAssignment
    folds: list[FoldResult]
    labels: np.ndarray
    students: np.ndarray
    warnings: list[str] = field(default_factory=list)

    def fold_metric(self, name: str) -> np.ndarray:
        return np.array([getattr(f, name) for f in self.folds])

    def aggregate(self, name: str) -> tuple[float, float]:
        """Mean and population std across folds, skipping undefined folds."""
        vals = self.fold_metric(name)
        vals = vals[~np.isnan(vals)]
        if len(vals) == 0:
            return float("nan"), float("nan")
        return float(vals.mean()), float(vals.std())

    @property
    def oof_probability(self) -> np.ndarray:
        out = np.full(len(self.labels), np.nan)
        for f in self.folds:
            out[f.test_index] = f.probability
        return out

    @property
    def oof_fold(self) -> np.ndarray:
        out = np.full(len(self.labels), -1, dtype=np.int64)
        for f in self.folds:
            out[f.test_index] = f.fold
        return out

    def to_dict(self) -> dict:
        auc_m, auc_s = self.aggregate("auc")
        f1_m, f1_s = self.aggregate("f1")
        return {
            "family": self.family.value,
            "k": self.k,
            "seed": self.seed,
            "folds": [
                {
                    "fold": f.fold,
                    "n_test": int(len(f.test_index)),
                    "auc": None if math.isnan(f.auc) else f.auc,
                    "f1": f.f1,
                    "hyperparameters": f.hyperparameters,
                }
                for f in self.folds
            ],
            "auc": {"mean": auc_m, "std": auc_s},
            "f1": {"mean": f1_m, "std": f1_s},
            "warnings": list(self.warnings),
        }

    def write_json(self, stream) -> None:
        json.dump(self.to_dict(), stream, indent=2, sort_keys=True)
        stream.write("\n")

    def prediction_rows(self):
        for f in self.folds:
            for idx, p in zip(f.test_index, f.probability):
                yield int(idx), int(self.students[idx]), int(self.labels[idx]), float(p), f.fold

    def write_predictions(self, stream, header: bool = True, with_family: bool = False) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        cols = ["sample_id", "student_id", "label", "probability", "fold"]
        if with_family:
            cols = ["family"] + cols
        if header:
            writer.writerow(cols)
        for sid, student, label, p, fold in sorted(self.prediction_rows()):
            row = [sid, format_id(student), label, repr(p), fold]
            writer.writerow([self.family.value] + row if with_family else row)


def _run_fold(family, grid, X, y, students, train_idx, test_idx, fold, seed, workers):
    scaler = fit_scaler(X[train_idx])
    Xtr = scaler.transform(X[train_idx])
    Xte = scaler.transform(X[test_idx])
    params = grid_search(family, grid, Xtr, y[train_idx], students[train_idx],
                         derive_seed(seed, "grid", fold), workers=workers)
    spec = ModelSpec(family, params, derive_seed(seed, "model", fold))
    model = train(spec, Xtr, y[train_idx], workers=workers)
    proba = model.predict_proba(Xte)
    auc = _auc_or_nan(proba, y[test_idx])
    f1 = weighted_f1((proba >= F1_THRESHOLD).astype(np.int64), y[test_idx])
    return FoldResult(fold, test_idx, proba, params, scaler, auc, f1)


def cross_validate(family, grid, dataset: Dataset, k: int = 10, seed: int = 0, workers: int = 1,
                   assignment: FoldAssignment | None = None) -> CVResult:
    """Student-level k-fold CV with per-fold scaling and grid search.

    Within every fold the scaler and the grid search see only the training
    portion. Folds run concurrently when ``workers > 1``; results are
    assembled in fold order.
    """
    family = Family(family)
    X, y, students = dataset.X, dataset.y, dataset.student
    if assignment is None:
        assignment = stratified_group_kfold(students, y, k, derive_seed(seed, "folds"))
    splits = list(assignment.splits(students))

    def run(f):
        tr, te = splits[f]
        return _run_fold(family, grid, X, y, students, tr, te, f, seed, 1 if workers > 1 else workers)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            folds = list(pool.map(run, range(assignment.k)))
    else:
        folds = [run(f) for f in range(assignment.k)]

    warnings = []
    for fr in folds:
        if math.isnan(fr.auc):
            msg = f"{family.value} fold {fr.fold}: AUC undefined (single class in test fold)"
            log.warning(msg)
            warnings.append(msg)
    return CVResult(family, assignment.k, seed, assignment, folds, y, students, warnings)


@dataclass(frozen=True)
class FeatureRemoval:
    feature: str
    auc_full: float
    auc_without: float

    @property
    def delta(self) -> float:
        return self.auc_without - self.auc_full


def backward_feature_selection(family, grid, dataset: Dataset, k: int = 10, seed: int = 0,
                               workers: int = 1) -> list[FeatureRemoval]:
    """AUC change from removing each feature in turn (diagnostic only).

    All runs share one fold assignment so the deltas are paired.
    """
    if dataset.X.shape[1] < 2:
        raise ValueError("backward selection needs at least two features")
    assignment = stratified_group_kfold(dataset.student, dataset.y, k, derive_seed(seed, "folds"))
    full = cross_validate(family, grid, dataset, k, seed, workers, assignment).aggregate("auc")[0]
    out = []
    for name in dataset.feature_names:
        reduced = dataset.drop_feature(name)
        auc = cross_validate(family, grid, reduced, k, seed, workers, assignment).aggregate("auc")[0]
        out.append(FeatureRemoval(name, full, auc))
    return out
