"""Synthetic LMS cohorts with controllable group-dependent bias.

Generative model, per student:

* latent engagement skill ~ N(0, 1);
* non-grade activity counts are Poisson with log-rate affine in skill, so
  more skilled students are more active;
* a share of students learn mostly offline: their activity log-rate has a
  lower intercept and a smaller skill slope, so LMS activity says little
  about them;
* each graded assignment is submitted with a lead time before its deadline
  that grows with skill, then graded some days later;
* normalized grade = logistic(grade_slope * skill + grade_offset +
  skill_noise * eps), rounded to the hundredth of a point.

Without a bias spec, the grade process is identical in every cluster. A
``LabelNoise`` bias reflects a target-cluster grade across the cohort-average
grade with probability ``strength``; ``FeatureAttenuation`` keeps each of the
target cluster's non-grade events with probability ``1 - strength``.
Every student draws from an independent stream keyed by (seed, index), so
output does not depend on the worker count.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .eventlog import (
    Event,
    EventKind,
    LocationRecord,
    format_id,
    write_event_log,
    write_location_log,
)
from .regions import (
    CLUSTER_ORDER,
    CLUSTER_REGIONS,
    STUDY_CLUSTER_COUNTS,
    RegionCluster,
    parse_cluster,
)

HOUR_MS = 3_600_000
DAY_MS = 24 * HOUR_MS
# 2021-08-26T00:00:00Z
SEMESTER_START_MS = 1_629_936_000_000

_STREAM_COURSES = 0
_STREAM_STUDENT = 1
_STREAM_BIAS = 2
_STREAM_IDS = 3


class BiasMode(str, Enum):
    LABEL_NOISE = "LabelNoise"
    FEATURE_ATTENUATION = "FeatureAttenuation"


@dataclass(frozen=True)
class BiasSpec:
    target_cluster: RegionCluster
    mode: BiasMode
    strength: float

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ConfigError(f"bias strength must be in [0, 1], got {self.strength}")

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                parse_cluster(str(d["target_cluster"])),
                BiasMode(d["mode"]),
                float(d["strength"]),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"invalid bias spec: {exc}") from None

    def to_dict(self):
        return {
            "target_cluster": self.target_cluster.value,
            "mode": self.mode.value,
            "strength": self.strength,
        }


def _default_weights():
    return {c: float(n) for c, n in STUDY_CLUSTER_COUNTS.items()}


@dataclass(frozen=True)
class CohortConfig:
    n_students: int
    region_weights: dict = field(default_factory=_default_weights)
    semester_span_days: float = 120.0
    events_per_student_mean: float = 8142.0
    skill_noise: float = 1.0
    bias: BiasSpec | None = None
    seed: int = 0
    missing_location_rate: float = 272 / 5986
    second_region_rate: float = 0.05
    courses_per_student: int = 4
    assignments_per_course: int = 8
    activity_skill_slope: float = 0.5
    grade_skill_slope: float = 1.5
    grade_offset: float = 1.2
    lead_hours_mean: float = 30.0
    lead_hours_skill_slope: float = 20.0
    lead_hours_sd: float = 30.0
    offline_share: float = 0.3
    offline_activity_scale: float = 0.2
    offline_skill_slope: float = 0.1

    def __post_init__(self):
        if not isinstance(self.n_students, (int, np.integer)) or self.n_students <= 0:
            raise ConfigError("n_students must be a positive integer")
        if self.n_students > 90000:
            raise ConfigError("n_students exceeds the 5-digit id space")
        weights = {}
        for key, w in self.region_weights.items():
            cluster = key if isinstance(key, RegionCluster) else parse_cluster(str(key))
            if not (w >= 0) or math.isinf(w):
                raise ConfigError(f"region weight for {cluster.value} must be finite and >= 0")
            weights[cluster] = float(w)
        if sum(weights.values()) <= 0:
            raise ConfigError("region weights must sum to a positive value")
        object.__setattr__(self, "region_weights", weights)
        if self.semester_span_days <= 0:
            raise ConfigError("semester_span_days must be positive")
        if self.events_per_student_mean <= 0:
            raise ConfigError("events_per_student_mean must be positive")
        if self.skill_noise < 0:
            raise ConfigError("skill_noise must be non-negative")
        for name in ("missing_location_rate", "second_region_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.courses_per_student <= 0 or self.assignments_per_course <= 0:
            raise ConfigError("course and assignment counts must be positive")
        if self.lead_hours_sd < 0:
            raise ConfigError("lead_hours_sd must be non-negative")
        if not 0.0 <= self.offline_share <= 1.0:
            raise ConfigError("offline_share must be in [0, 1]")
        if self.offline_activity_scale <= 0:
            raise ConfigError("offline_activity_scale must be positive")
        if self.offline_skill_slope < 0:
            raise ConfigError("offline_skill_slope must be non-negative")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "bias" in d and d["bias"] is not None and not isinstance(d["bias"], BiasSpec):
            d["bias"] = BiasSpec.from_dict(d["bias"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown cohort config keys: {sorted(unknown)}")
        if "n_students" not in d:
            raise ConfigError("n_students is required")
        try:
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self):
        out = {}
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            if name == "region_weights":
                v = {c.value: w for c, w in v.items()}
            elif name == "bias":
                v = None if v is None else v.to_dict()
            out[name] = v
        return out


@dataclass(frozen=True)
class GradeTruth:
    course: int
    timestamp: int
    object_id: str
    grade: float
    success_probability: float
    flipped: bool = False


@dataclass
class StudentTruth:
    student: int
    skill: float
    cluster: RegionCluster
    has_location: bool
    grades: list[GradeTruth] = field(default_factory=list)


@dataclass
class GroundTruth:
    threshold: float
    students: list[StudentTruth]

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "students": [
                {
                    "student_id": format_id(s.student),
                    "skill": s.skill,
                    "cluster": s.cluster.value,
                    "has_location": s.has_location,
                    "grades": [
                        {
                            "course_id": format_id(g.course),
                            "timestamp_ms": g.timestamp,
                            "object_id": g.object_id,
                            "grade": g.grade,
                            "success_probability": g.success_probability,
                            "flipped": g.flipped,
                        }
                        for g in s.grades
                    ],
                }
                for s in self.students
            ],
        }


@dataclass
class Cohort:
    config: CohortConfig
    events: list[Event]
    locations: list[LocationRecord]
    truth: GroundTruth


@dataclass(frozen=True)
class _Course:
    course_id: int
    start_ms: int
    end_ms: int
    assignments: tuple  # (object_id, kind, due_ms, has_due, points_possible)


def _rng(seed, *stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *stream]))


def _course_catalogue(cfg: CohortConfig, n_courses: int) -> list[_Course]:
    rng = _rng(cfg.seed, _STREAM_COURSES)
    ids = rng.choice(90000, size=n_courses, replace=False) + 10000
    span_ms = int(cfg.semester_span_days * DAY_MS)
    courses = []
    for cid in ids:
        start = SEMESTER_START_MS + int(rng.integers(0, max(1, span_ms // 20)))
        end = start + span_ms
        n_a = cfg.assignments_per_course
        items = []
        for k in range(n_a):
            frac = (k + 1) / (n_a + 1)
            due = start + int(frac * span_ms + rng.normal(0, DAY_MS))
            due = min(max(due, start + HOUR_MS), end)
            kind = EventKind.QUIZ_SUBMIT if rng.random() < 0.4 else EventKind.ASSIGNMENT_SUBMIT
            has_due = bool(rng.random() < 0.9)
            possible = float(rng.choice([10, 20, 50, 100]))
            items.append((f"a{k + 1:02d}", kind, due, has_due, possible))
        courses.append(_Course(int(cid), start, end, tuple(items)))
    return courses


def _logistic(x):
    return 1.0 / (1.0 + math.exp(-x))


def _normal_cdf(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


@dataclass
class _RawStudent:
    index: int
    student: int
    skill: float
    cluster: RegionCluster
    locations: list[LocationRecord]
    grades: list  # [course, ts, object_id, grade, possible]
    activity: list  # [course, ts, kind, object_id, text_length, due]


def _gen_student(cfg, index, student_id, courses, cluster_p, structured_per_student):
    rng = _rng(cfg.seed, _STREAM_STUDENT, index)
    skill = float(rng.standard_normal())
    cluster = CLUSTER_ORDER[int(rng.choice(len(CLUSTER_ORDER), p=cluster_p))]

    locations = []
    if rng.random() >= cfg.missing_location_rate:
        home_choices = CLUSTER_REGIONS[cluster]
        home = home_choices[int(rng.integers(len(home_choices)))]
        n_conn = 3 + int(rng.poisson(5))
        for _ in range(n_conn):
            region = home
            if rng.random() < cfg.second_region_rate:
                # occasional connection from elsewhere, drawn from the cohort mix
                other = CLUSTER_ORDER[int(rng.choice(len(CLUSTER_ORDER), p=cluster_p))]
                options = CLUSTER_REGIONS[other]
                region = options[int(rng.integers(len(options)))]
            locations.append(LocationRecord(student_id, region))

    chosen = rng.choice(len(courses), size=min(cfg.courses_per_student, len(courses)), replace=False)
    chosen = sorted(int(c) for c in chosen)

    if rng.random() < cfg.offline_share:
        slope, scale = cfg.offline_skill_slope, cfg.offline_activity_scale
    else:
        slope, scale = cfg.activity_skill_slope, 1.0
    multiplier = scale * math.exp(slope * skill - slope * slope / 2.0)
    free_budget = max(0.0, cfg.events_per_student_mean - structured_per_student)
    per_course = free_budget * multiplier / len(chosen)

    activity = []
    grades = []
    for ci in chosen:
        course = courses[ci]
        cid = course.course_id
        span = course.end_ms - course.start_ms

        counts = rng.poisson([per_course * 0.85, per_course * 0.05, per_course * 0.05, per_course * 0.05])
        n_total = int(counts.sum())
        if n_total:
            n_sessions = max(1, int(math.ceil(n_total / 6)))
            starts = course.start_ms + rng.integers(0, span, size=n_sessions)
            which = rng.integers(0, n_sessions, size=n_total)
            offsets = rng.integers(0, 45 * 60_000, size=n_total)
            ts_all = starts[which] + offsets
            pos = 0
            n_ra, n_up, n_ed, n_fp = (int(c) for c in counts)
            res = rng.integers(0, 40, size=n_ra)
            for j in range(n_ra):
                activity.append((cid, int(ts_all[pos]), EventKind.RESOURCE_ACCESS, f"r{int(res[j]):03d}", None, None))
                pos += 1
            for j in range(n_up):
                activity.append((cid, int(ts_all[pos]), EventKind.FILE_UPLOAD, f"f{j:04d}", None, None))
                pos += 1
            for j in range(n_ed):
                activity.append((cid, int(ts_all[pos]), EventKind.FILE_EDIT, f"f{j:04d}", None, None))
                pos += 1
            lengths = np.maximum(0, rng.lognormal(math.log(80) + 0.3 * skill, 0.8, size=n_fp)).astype(int)
            for j in range(n_fp):
                activity.append((cid, int(ts_all[pos]), EventKind.FORUM_POST, f"p{j:04d}", int(lengths[j]), None))
                pos += 1

        for object_id, kind, due, has_due, possible in course.assignments:
            lead = rng.normal(cfg.lead_hours_mean + cfg.lead_hours_skill_slope * skill, cfg.lead_hours_sd)
            submit_ts = max(course.start_ms + 1, int(due - lead * HOUR_MS))
            if kind is EventKind.ASSIGNMENT_SUBMIT:
                upload_ts = max(course.start_ms + 1, submit_ts - int(rng.integers(60_000, 30 * 60_000)))
                activity.append((cid, upload_ts, EventKind.FILE_UPLOAD, object_id, None, None))
            activity.append((cid, submit_ts, kind, object_id, None, due if has_due else None))
            grade_ts = max(submit_ts, due) + int(rng.integers(DAY_MS, 7 * DAY_MS))
            z = cfg.grade_skill_slope * skill + cfg.grade_offset + cfg.skill_noise * float(rng.standard_normal())
            g = _logistic(z)
            awarded = min(possible, round(g * possible, 2))
            grades.append([cid, grade_ts, object_id, awarded / possible, possible, awarded])

    return _RawStudent(index, student_id, skill, cluster, locations, grades, activity)


def _success_probability(cfg, skill, threshold):
    if threshold <= 0.0:
        return 1.0
    if threshold >= 1.0:
        return 0.0
    margin = cfg.grade_skill_slope * skill + cfg.grade_offset - math.log(threshold / (1 - threshold))
    if cfg.skill_noise == 0:
        return 1.0 if margin >= 0 else 0.0
    return _normal_cdf(margin / cfg.skill_noise)


def generate_cohort(config: CohortConfig, workers: int = 1) -> Cohort:
    """Build events, location rows and ground truth for ``config``."""
    cfg = config
    n_courses = max(8, math.ceil(cfg.n_students * cfg.courses_per_student / 40))
    courses = _course_catalogue(cfg, n_courses)

    id_rng = _rng(cfg.seed, _STREAM_IDS)
    student_ids = sorted(int(s) for s in id_rng.choice(90000, size=cfg.n_students, replace=False) + 10000)

    weights = np.array([cfg.region_weights.get(c, 0.0) for c in CLUSTER_ORDER])
    cluster_p = weights / weights.sum()

    n_assign = cfg.courses_per_student * cfg.assignments_per_course
    structured = n_assign * (2 + 0.6)

    def one(i):
        return _gen_student(cfg, i, student_ids[i], courses, cluster_p, structured)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(one, range(cfg.n_students)))
    else:
        raw = [one(i) for i in range(cfg.n_students)]

    all_grades = [g[3] for r in raw for g in r.grades]
    threshold = float(np.mean(all_grades)) if all_grades else 0.0

    bias = cfg.bias
    events: list[Event] = []
    locations: list[LocationRecord] = []
    truth_students = []
    for r in raw:
        targeted = bias is not None and r.cluster == bias.target_cluster
        brng = _rng(cfg.seed, _STREAM_BIAS, r.index)

        activity = r.activity
        if targeted and bias.mode is BiasMode.FEATURE_ATTENUATION:
            keep = brng.random(len(activity)) >= bias.strength
            activity = [a for a, k in zip(activity, keep) if k]

        p_base = _success_probability(cfg, r.skill, threshold)
        student_events = []
        grade_truths = []
        for cid, ts, kind, obj, tl, due in activity:
            student_events.append(Event(r.student, cid, ts, kind, obj, tl, due))
        flips = brng.random(len(r.grades)) if targeted and bias.mode is BiasMode.LABEL_NOISE else None
        for gi, (cid, ts, obj, g, possible, awarded) in enumerate(r.grades):
            p = p_base
            flipped = False
            if flips is not None:
                p = (1 - bias.strength) * p_base + bias.strength * (1 - p_base)
                if flips[gi] < bias.strength:
                    flipped = True
                    g_new = min(1.0, max(0.0, 2 * threshold - g))
                    if g >= threshold and g_new >= threshold:
                        g_new = math.nextafter(threshold, 0.0)
                    awarded = min(possible, round(g_new * possible, 2))
                    g = awarded / possible
            student_events.append(
                Event(r.student, cid, ts, EventKind.GRADE_RECEIVED, obj, points_awarded=awarded, points_possible=possible)
            )
            grade_truths.append(GradeTruth(cid, ts, obj, g, p, flipped))
        student_events.sort(key=lambda e: (e.course, e.timestamp))
        events.extend(student_events)
        locations.extend(r.locations)
        truth_students.append(StudentTruth(r.student, r.skill, r.cluster, bool(r.locations), grade_truths))

    return Cohort(cfg, events, locations, GroundTruth(threshold, truth_students))


def emit_cohort(cohort: Cohort, out_dir) -> dict[str, Path]:
    """Write events.csv, locations.csv and truth.json into ``out_dir``."""
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    paths = {
        "events": out / "events.csv",
        "locations": out / "locations.csv",
        "truth": out / "truth.json",
    }
    with open(paths["events"], "w", newline="", encoding="utf-8") as fh:
        write_event_log(cohort.events, fh)
    with open(paths["locations"], "w", newline="", encoding="utf-8") as fh:
        write_location_log(cohort.locations, fh)
    with open(paths["truth"], "w", encoding="utf-8") as fh:
        doc = {"config": cohort.config.to_dict(), **cohort.truth.to_dict()}
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return paths
