"""Per-grade feature extraction, labelling and z-score scaling.

Each GradeReceived event yields one sample whose 27 features summarise the
student's earlier activity in the same course. Only events with a timestamp
strictly before the grade contribute; extraction is a single forward pass per
course, emitting every grade of a timestamp before absorbing that
timestamp's events.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .eventlog import SUBMISSION_KINDS, EventKind, StudentTimeline, format_id, parse_id

HOUR_MS = 3_600_000.0
DAY_MS = 86_400_000

COUNT_FEATURES = (
    "n_resource_access",
    "n_file_upload",
    "n_file_edit",
    "n_forum_post",
    "n_assignment_submit",
    "n_quiz_submit",
    "n_distinct_resources",
    "n_active_days",
    "n_sessions",
    "n_prior_grades",
)
CONDITIONED_FEATURES = (
    "n_forum_post_min100",
    "n_on_time_submissions",
    "n_late_submissions",
    "avg_resources_per_active_day",
    "avg_submissions_per_active_day",
    "ratio_on_time",
    "n_resource_access_last7d",
    "n_submissions_last7d",
    "avg_forum_post_length",
)
TIMING_FEATURES = (
    "mean_gap_resource_access",
    "std_gap_resource_access",
    "mean_gap_submission",
    "std_gap_submission",
    "time_first_event_to_grade",
    "time_last_event_to_grade",
    "mean_lead_before_deadline",
    "std_lead_before_deadline",
)
FEATURE_NAMES = COUNT_FEATURES + CONDITIONED_FEATURES + TIMING_FEATURES
N_FEATURES = len(FEATURE_NAMES)
MIN_POST_LENGTH = 100


@dataclass(frozen=True)
class GradeSample:
    student: int
    course: int
    grade_timestamp: int
    features: tuple[float, ...]
    grade: float
    label: int | None = None
    object_id: str = ""


def normalize_grade(points_awarded: float, points_possible: float) -> float:
    if not points_possible > 0:
        raise ValueError("points_possible must be positive")
    if not 0 <= points_awarded <= points_possible:
        raise ValueError("points_awarded must lie in [0, points_possible]")
    return points_awarded / points_possible


class _Running:
    """Welford accumulator with population standard deviation."""

    __slots__ = ("n", "mean", "m2")

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def add(self, x):
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    def stats(self):
        if self.n == 0:
            return 0.0, 0.0
        return self.mean, math.sqrt(max(self.m2, 0.0) / self.n)


def _course_samples(student, course, events, session_gap_ms, window_ms):
    kind_counts = dict.fromkeys(EventKind, 0)
    resources = set()
    days = set()
    n_sessions = 0
    n_post_min = 0
    post_len_sum = 0
    n_on_time = 0
    n_late = 0
    res_gap = _Running()
    sub_gap = _Running()
    lead = _Running()
    recent_res: deque = deque()
    recent_sub: deque = deque()
    first_ts = None
    last_ts = None
    last_res = None
    last_sub = None

    samples = []
    n = len(events)
    i = 0
    while i < n:
        t = events[i].timestamp
        j = i
        while j < n and events[j].timestamp == t:
            j += 1

        for e in events[i:j]:
            if e.kind is not EventKind.GRADE_RECEIVED:
                continue
            pa, pp = e.points_awarded, e.points_possible
            if pa is None or pp is None or not pp > 0 or not 0 <= pa <= pp:
                continue
            cutoff = t - window_ms
            while recent_res and recent_res[0] < cutoff:
                recent_res.popleft()
            while recent_sub and recent_sub[0] < cutoff:
                recent_sub.popleft()

            n_days = len(days)
            n_ra = kind_counts[EventKind.RESOURCE_ACCESS]
            n_subs = n_on_time + n_late
            n_fp = kind_counts[EventKind.FORUM_POST]
            rg_mean, rg_std = res_gap.stats()
            sg_mean, sg_std = sub_gap.stats()
            ld_mean, ld_std = lead.stats()
            features = (
                float(n_ra),
                float(kind_counts[EventKind.FILE_UPLOAD]),
                float(kind_counts[EventKind.FILE_EDIT]),
                float(n_fp),
                float(kind_counts[EventKind.ASSIGNMENT_SUBMIT]),
                float(kind_counts[EventKind.QUIZ_SUBMIT]),
                float(len(resources)),
                float(n_days),
                float(n_sessions),
                float(kind_counts[EventKind.GRADE_RECEIVED]),
                float(n_post_min),
                float(n_on_time),
                float(n_late),
                n_ra / n_days if n_days else 0.0,
                n_subs / n_days if n_days else 0.0,
                n_on_time / n_subs if n_subs else 0.0,
                float(len(recent_res)),
                float(len(recent_sub)),
                post_len_sum / n_fp if n_fp else 0.0,
                rg_mean,
                rg_std,
                sg_mean,
                sg_std,
                (t - first_ts) / HOUR_MS if first_ts is not None else 0.0,
                (t - last_ts) / HOUR_MS if last_ts is not None else 0.0,
                ld_mean,
                ld_std,
            )
            samples.append(GradeSample(student, course, t, features, pa / pp, None, e.object_id))

        for e in events[i:j]:
            kind = e.kind
            kind_counts[kind] += 1
            if first_ts is None:
                first_ts = t
                n_sessions = 1
            elif t - last_ts > session_gap_ms:
                n_sessions += 1
            last_ts = t
            days.add(t // DAY_MS)
            if kind is EventKind.RESOURCE_ACCESS:
                resources.add(e.object_id)
                if last_res is not None:
                    res_gap.add((t - last_res) / HOUR_MS)
                last_res = t
                recent_res.append(t)
            elif kind in SUBMISSION_KINDS:
                if last_sub is not None:
                    sub_gap.add((t - last_sub) / HOUR_MS)
                last_sub = t
                recent_sub.append(t)
                due = e.due_timestamp
                if due is None or t <= due:
                    n_on_time += 1
                else:
                    n_late += 1
                if due is not None:
                    lead.add((due - t) / HOUR_MS)
            elif kind is EventKind.FORUM_POST:
                length = e.text_length or 0
                post_len_sum += length
                if length >= MIN_POST_LENGTH:
                    n_post_min += 1
        i = j
    return samples


def extract_samples(
    timeline: StudentTimeline,
    session_gap_minutes: float = 30.0,
    window_hours: float = 168.0,
) -> list[GradeSample]:
    """One unlabelled sample per valid GradeReceived event of ``timeline``.

    Courses are processed in ascending id order, grades in time order.
    """
    gap_ms = session_gap_minutes * 60_000
    window_ms = window_hours * HOUR_MS
    out = []
    for course in sorted(timeline.courses):
        out.extend(_course_samples(timeline.student, course, timeline.courses[course], gap_ms, window_ms))
    return out


def dataset_average(samples: Iterable[GradeSample]) -> float:
    grades = [s.grade for s in samples]
    if not grades:
        raise DataError("no samples: dataset average is undefined")
    return math.fsum(grades) / len(grades)


def label_samples(samples: Iterable[GradeSample], average: float) -> list[GradeSample]:
    """Label 1 ("unsuccessful") iff the grade is strictly below ``average``."""
    return [replace(s, label=int(s.grade < average)) for s in samples]


@dataclass
class Dataset:
    """Column-oriented view of labelled samples used by model training."""

    X: np.ndarray
    y: np.ndarray
    grade: np.ndarray
    student: np.ndarray
    course: np.ndarray
    timestamp: np.ndarray
    feature_names: tuple[str, ...] = FEATURE_NAMES
    object_id: tuple[str, ...] | None = None

    def __len__(self):
        return self.X.shape[0]

    @property
    def average_grade(self) -> float:
        return float(math.fsum(self.grade.tolist()) / len(self.grade)) if len(self.grade) else float("nan")

    @property
    def positive_rate(self) -> float:
        return float(self.y.mean()) if len(self.y) else float("nan")

    @classmethod
    def from_samples(cls, samples: Sequence[GradeSample]) -> "Dataset":
        if any(s.label is None for s in samples):
            raise DataError("samples must be labelled before building a dataset")
        n = len(samples)
        X = np.array([s.features for s in samples], dtype=np.float64).reshape(n, N_FEATURES)
        return cls(
            X=X,
            y=np.array([s.label for s in samples], dtype=np.int64),
            grade=np.array([s.grade for s in samples], dtype=np.float64),
            student=np.array([s.student for s in samples], dtype=np.int64),
            course=np.array([s.course for s in samples], dtype=np.int64),
            timestamp=np.array([s.grade_timestamp for s in samples], dtype=np.int64),
            object_id=tuple(s.object_id for s in samples),
        )

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        obj = None if self.object_id is None else tuple(np.asarray(self.object_id, dtype=object)[idx])
        return Dataset(
            self.X[idx], self.y[idx], self.grade[idx], self.student[idx],
            self.course[idx], self.timestamp[idx], self.feature_names, obj,
        )

    def drop_feature(self, name: str) -> "Dataset":
        j = self.feature_names.index(name)
        keep = [i for i in range(len(self.feature_names)) if i != j]
        names = tuple(self.feature_names[i] for i in keep)
        return replace(self, X=self.X[:, keep], feature_names=names)

    def with_features(self, names: Sequence[str]) -> "Dataset":
        cols = [self.feature_names.index(n) for n in names]
        return replace(self, X=self.X[:, cols], feature_names=tuple(names))

    def write_csv(self, stream) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(
            ["sample_id", "student_id", "course_id", "grade_timestamp_ms", "object_id",
             *self.feature_names, "grade", "label"]
        )
        for i in range(len(self)):
            writer.writerow(
                [
                    i,
                    format_id(int(self.student[i])),
                    format_id(int(self.course[i])),
                    int(self.timestamp[i]),
                    "" if self.object_id is None else self.object_id[i],
                    *(repr(float(v)) for v in self.X[i]),
                    repr(float(self.grade[i])),
                    int(self.y[i]),
                ]
            )

    @classmethod
    def read_csv(cls, stream) -> "Dataset":
        reader = csv.reader(stream)
        header = next(reader)
        try:
            start = header.index("object_id") + 1
            end = header.index("grade")
        except ValueError:
            raise DataError("featurized dataset header is malformed") from None
        names = tuple(header[start:end])
        rows = list(reader)
        n = len(rows)
        X = np.array([[float(v) for v in r[start:end]] for r in rows], dtype=np.float64).reshape(n, len(names))
        return cls(
            X=X,
            y=np.array([int(r[end + 1]) for r in rows], dtype=np.int64),
            grade=np.array([float(r[end]) for r in rows], dtype=np.float64),
            student=np.array([parse_id(r[1]) for r in rows], dtype=np.int64),
            course=np.array([parse_id(r[2]) for r in rows], dtype=np.int64),
            timestamp=np.array([int(r[3]) for r in rows], dtype=np.int64),
            feature_names=names,
            object_id=tuple(r[4] for r in rows),
        )


def featurize(timelines, session_gap_minutes: float = 30.0, window_hours: float = 168.0) -> Dataset:
    """Extract, label against the dataset average, and pack as a Dataset."""
    if isinstance(timelines, dict):
        timelines = timelines.values()
    samples = []
    for tl in timelines:
        samples.extend(extract_samples(tl, session_gap_minutes, window_hours))
    if not samples:
        return Dataset(
            np.empty((0, N_FEATURES)), np.empty(0, np.int64), np.empty(0),
            np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64), FEATURE_NAMES, (),
        )
    avg = dataset_average(samples)
    return Dataset.from_samples(label_samples(samples, avg))


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        safe = np.where(self.std > 0, self.std, 1.0)
        Z = (X - self.mean) / safe
        Z[:, self.std == 0] = 0.0
        return Z


def _matrix(samples) -> np.ndarray:
    if isinstance(samples, Dataset):
        return samples.X
    if len(samples) and isinstance(samples[0], GradeSample):
        return np.array([s.features for s in samples], dtype=np.float64)
    return np.asarray(samples, dtype=np.float64)


def fit_scaler(samples) -> Scaler:
    """Per-feature mean and population std from training samples only."""
    X = _matrix(samples)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("cannot fit a scaler on an empty training set")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    # float noise on constant columns must not masquerade as variance
    const = np.all(X == X[0], axis=0)
    std[const] = 0.0
    return Scaler(mean, std)


def apply_scaler(scaler: Scaler, samples):
    if isinstance(samples, Dataset):
        return replace(samples, X=scaler.transform(samples.X))
    if len(samples) and isinstance(samples[0], GradeSample):
        Z = scaler.transform(np.array([s.features for s in samples]))
        return [replace(s, features=tuple(z.tolist())) for s, z in zip(samples, Z)]
    return scaler.transform(samples)
