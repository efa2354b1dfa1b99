"""Group resolution, per-group metrics, MADD, fairness report tables and
grade distribution summaries."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .evaluation.cv import F1_THRESHOLD, CVResult
from .evaluation.metrics import UndefinedMetricError, auc_roc, weighted_f1
from .eventlog import LocationRecord
from .regions import CLUSTER_ORDER, REGION_ORDER, REGION_TO_CLUSTER, RegionCluster, RegionCode

log = logging.getLogger(__name__)

DEFAULT_BIN_WIDTH = 0.01
METRICS = ("AUC", "F1", "MADD")
KDE_POINTS = 101


def resolve_majority_region(records: Iterable) -> RegionCode | None:
    """Region with the most connections; ties go to the earlier region code.

    Accepts LocationRecords or bare RegionCodes. No records means the
    location is unknown and None is returned.
    """
    counts = Counter(r.region if isinstance(r, LocationRecord) else RegionCode(r) for r in records)
    if not counts:
        return None
    return min(counts, key=lambda code: (-counts[code], REGION_ORDER[code]))


def cluster_region(region: RegionCode) -> RegionCluster:
    return REGION_TO_CLUSTER[RegionCode(region)]


def resolve_groups(records: Iterable[LocationRecord], students: Iterable[int] = ()) -> dict:
    """Map each student to a cluster via their majority region.

    Students named in ``students`` but without location rows map to None.
    """
    by_student: dict[int, list] = {}
    for r in records:
        by_student.setdefault(r.student, []).append(r.region)
    groups: dict[int, RegionCluster | None] = {int(s): None for s in students}
    for student, regions in by_student.items():
        groups[student] = cluster_region(resolve_majority_region(regions))
    return dict(sorted(groups.items()))


def madd(group_scores, rest_scores, bin_width: float = DEFAULT_BIN_WIDTH) -> float:
    """L1 distance between the binned probability densities of two groups.

    Probabilities fall into ceil(1 / bin_width) equal bins over [0, 1] (1.0
    lands in the last bin); each group's histogram is normalised to sum to 1.
    The result lies in [0, 2].
    """
    if not 0 < bin_width <= 1:
        raise ValueError("bin_width must be in (0, 1]")
    g = np.asarray(group_scores, dtype=np.float64)
    r = np.asarray(rest_scores, dtype=np.float64)
    if g.size == 0 or r.size == 0:
        raise ValueError("MADD needs non-empty score lists for both groups")
    n_bins = math.ceil(1.0 / bin_width)
    cg = np.bincount(_bins(g, bin_width, n_bins), minlength=n_bins)
    cr = np.bincount(_bins(r, bin_width, n_bins), minlength=n_bins)
    # integer cross-multiplication keeps the extremes 0 and 2 exact
    diff = int(np.abs(cg.astype(object) * r.size - cr.astype(object) * g.size).sum())
    return diff / (g.size * r.size)


def _bins(p, bin_width, n_bins):
    idx = np.floor(p / bin_width).astype(np.int64)
    return np.clip(idx, 0, n_bins - 1)


@dataclass
class GroupFoldMetrics:
    """Per-fold AUC / F1 for one group; NaN marks an undefined cell."""

    group: object
    auc: np.ndarray
    f1: np.ndarray
    n_students: int


def per_group_metrics(cv: CVResult, groups: Mapping, warnings: list | None = None) -> dict:
    """Restrict each fold's out-of-fold predictions to every group in turn.

    Cells with an empty or single-class restriction are undefined (NaN) for
    both metrics and reported in ``warnings``. Students mapped to None are
    skipped; groups with no students get no entry.
    """
    present = _ordered_groups(groups.values())
    codes = _group_codes(cv.students, groups, present)
    out = {}
    for gi, g in enumerate(present):
        members = codes == gi
        n_students = len(np.unique(cv.students[members]))
        aucs, f1s = [], []
        for fr in cv.folds:
            mask = members[fr.test_index]
            labels = cv.labels[fr.test_index][mask]
            proba = fr.probability[mask]
            if labels.size == 0 or labels.min() == labels.max():
                msg = f"{cv.family.value} fold {fr.fold} group {_name(g)}: single class or empty, cell undefined"
                log.warning(msg)
                if warnings is not None:
                    warnings.append(msg)
                aucs.append(float("nan"))
                f1s.append(float("nan"))
                continue
            aucs.append(auc_roc(proba, labels))
            f1s.append(weighted_f1((proba >= F1_THRESHOLD).astype(np.int64), labels))
        out[g] = GroupFoldMetrics(g, np.array(aucs), np.array(f1s), n_students)
    return out


def per_group_madd(cv: CVResult, groups: Mapping, bin_width: float = DEFAULT_BIN_WIDTH,
                   warnings: list | None = None) -> dict:
    """One-vs-rest MADD per fold; the rest is every other located student."""
    present = _ordered_groups(groups.values())
    codes = _group_codes(cv.students, groups, present)
    out = {}
    for gi, g in enumerate(present):
        vals = []
        for fr in cv.folds:
            sg = codes[fr.test_index]
            mine = sg == gi
            rest = (sg >= 0) & ~mine
            if not mine.any() or not rest.any():
                msg = f"{cv.family.value} fold {fr.fold} group {_name(g)}: MADD undefined (empty side)"
                log.warning(msg)
                if warnings is not None:
                    warnings.append(msg)
                vals.append(float("nan"))
                continue
            vals.append(madd(fr.probability[mine], fr.probability[rest], bin_width))
        out[g] = np.array(vals)
    return out


def _ordered_groups(values):
    seen = {v for v in values if v is not None}
    ordered = [c for c in CLUSTER_ORDER if c in seen]
    others = sorted((v for v in seen if v not in CLUSTER_ORDER), key=str)
    return ordered + others


def _group_codes(students, groups: Mapping, order) -> np.ndarray:
    """Index into ``order`` per sample, -1 for unlocated students."""
    index = {g: i for i, g in enumerate(order)}
    return np.array([index.get(groups.get(int(s)), -1) for s in students], dtype=np.int64)


def _name(g):
    return g.value if isinstance(g, RegionCluster) else str(g)


@dataclass(frozen=True)
class Cell:
    mean: float
    std: float
    n_folds: int

    @classmethod
    def from_folds(cls, values) -> "Cell | None":
        v = np.asarray(values, dtype=np.float64)
        v = v[~np.isnan(v)]
        if v.size == 0:
            return None
        return cls(float(v.mean()), float(v.std()), int(v.size))

    def to_dict(self):
        return {"mean": self.mean, "std": self.std, "n_folds": self.n_folds}


@dataclass
class ReportRow:
    family: str
    metric: str
    overall: Cell | None
    groups: dict  # cluster -> Cell | None
    mean: float | None
    delta: float | None

    def to_dict(self):
        return {
            "family": self.family,
            "metric": self.metric,
            "All": None if self.overall is None else self.overall.to_dict(),
            "groups": {_name(g): (None if c is None else c.to_dict()) for g, c in self.groups.items()},
            "Mean": self.mean,
            "Delta_All": self.delta,
        }


@dataclass
class FairnessReport:
    rows: list[ReportRow]
    clusters: list
    bin_width: float
    n_students_modeling: int
    n_students_fairness: int
    group_sizes: dict
    warnings: list[str] = field(default_factory=list)

    def row(self, family, metric) -> ReportRow:
        for r in self.rows:
            if r.family == _family_name(family) and r.metric == metric:
                return r
        raise KeyError((family, metric))

    @property
    def families(self) -> list[str]:
        out = []
        for r in self.rows:
            if r.family not in out:
                out.append(r.family)
        return out

    def to_dict(self):
        return {
            "bin_width": self.bin_width,
            "clusters": [_name(c) for c in self.clusters],
            "n_students_modeling": self.n_students_modeling,
            "n_students_fairness": self.n_students_fairness,
            "group_sizes": {_name(g): n for g, n in self.group_sizes.items()},
            "rows": [r.to_dict() for r in self.rows],
            "warnings": list(self.warnings),
        }

    def write_json(self, stream):
        json.dump(self.to_dict(), stream, indent=2, sort_keys=True)
        stream.write("\n")

    def write_csv(self, stream, digits: int = 4):
        """Rows family x metric; columns All, one per cluster, Mean, Delta_All.

        Cells read ``mean (std)``; N/A where a value does not apply.
        """
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["family", "metric", "All", *(_name(c) for c in CLUSTER_ORDER), "Mean", "Delta_All"])

        def cell(c):
            return "N/A" if c is None else f"{c.mean:.{digits}f} ({c.std:.{digits}f})"

        for r in self.rows:
            writer.writerow(
                [
                    r.family,
                    r.metric,
                    cell(r.overall),
                    *(cell(r.groups.get(c)) for c in CLUSTER_ORDER),
                    "N/A" if r.mean is None else f"{r.mean:.{digits}f}",
                    "N/A" if r.delta is None else f"{r.delta:+.{digits}f}",
                ]
            )


def _family_name(f):
    return getattr(f, "value", f)


def fairness_report(cv_results, groups: Mapping, bin_width: float = DEFAULT_BIN_WIDTH) -> FairnessReport:
    """Per-group AUC, F1 and one-vs-rest MADD for each family.

    Families are ordered by overall AUC, best first. ``Mean`` averages the
    per-cluster means; ``Delta_All`` is Mean minus the overall value (AUC and
    F1 only).
    """
    if isinstance(cv_results, CVResult):
        cv_results = [cv_results]
    cv_results = list(cv_results.values()) if isinstance(cv_results, Mapping) else list(cv_results)
    warnings: list[str] = []
    blocks = []
    clusters = _ordered_groups(groups.values())
    for cv in cv_results:
        warnings.extend(cv.warnings)
        gm = per_group_metrics(cv, groups, warnings)
        gmadd = per_group_madd(cv, groups, bin_width, warnings)
        rows = []
        for metric in METRICS:
            if metric == "MADD":
                overall = None
                cells = {g: Cell.from_folds(gmadd[g]) for g in clusters}
            else:
                attr = metric.lower()
                overall = Cell.from_folds(cv.fold_metric(attr))
                cells = {g: Cell.from_folds(getattr(gm[g], attr)) for g in clusters}
            defined = [c.mean for c in cells.values() if c is not None]
            mean = float(np.mean(defined)) if defined else None
            delta = None
            if metric != "MADD" and mean is not None and overall is not None:
                delta = mean - overall.mean
            rows.append(ReportRow(cv.family.value, metric, overall, cells, mean, delta))
        sort_key = rows[0].overall.mean if rows[0].overall is not None else -math.inf
        blocks.append((sort_key, rows))
    blocks.sort(key=lambda b: -b[0])

    all_students = set()
    for cv in cv_results:
        all_students.update(int(s) for s in cv.students)
    located = {s for s in all_students if groups.get(s) is not None}
    sizes = Counter(groups[s] for s in located)
    return FairnessReport(
        rows=[r for _, rows in blocks for r in rows],
        clusters=clusters,
        bin_width=bin_width,
        n_students_modeling=len(all_students),
        n_students_fairness=len(located),
        group_sizes={c: sizes[c] for c in clusters},
        warnings=warnings,
    )


@dataclass(frozen=True)
class GradeSummary:
    n: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    bandwidth: float
    kde_x: np.ndarray
    kde_density: np.ndarray


def five_number_summary(values):
    v = np.asarray(values, dtype=np.float64)
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return tuple(float(x) for x in q)


def silverman_bandwidth(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    sd = float(v.std(ddof=1)) if n > 1 else 0.0
    if sd == 0.0:
        # degenerate sample: narrow kernel on a single point mass
        return 0.01
    return sd * (4.0 / (3.0 * n)) ** 0.2


def gaussian_kde(values, x, bandwidth) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    z = (np.asarray(x)[:, None] - v[None, :]) / bandwidth
    return np.exp(-0.5 * z * z).sum(axis=1) / (v.size * bandwidth * math.sqrt(2 * math.pi))


def grade_distribution_stats(grades, students, groups: Mapping) -> dict:
    """Per-cluster five-number summary and KDE of normalized grades."""
    grades = np.asarray(grades, dtype=np.float64)
    present = _ordered_groups(groups.values())
    codes = _group_codes(students, groups, present)
    x = np.linspace(0.0, 1.0, KDE_POINTS)
    out = {}
    for gi, g in enumerate(present):
        vals = grades[codes == gi]
        if vals.size == 0:
            continue
        mn, q1, med, q3, mx = five_number_summary(vals)
        bw = silverman_bandwidth(vals)
        out[g] = GradeSummary(int(vals.size), mn, q1, med, q3, mx, bw, x, gaussian_kde(vals, x, bw))
    return out


def write_grade_stats(stats: Mapping, stream) -> None:
    """Long-format CSV: cluster, statistic, x, value."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["cluster", "statistic", "x", "value"])
    for g, s in stats.items():
        name = _name(g)
        for stat in ("n", "minimum", "q1", "median", "q3", "maximum", "bandwidth"):
            writer.writerow([name, stat, "", repr(float(getattr(s, stat)))])
        for xv, d in zip(s.kde_x, s.kde_density):
            writer.writerow([name, "kde", f"{xv:.2f}", repr(float(d))])
