import io
import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmsfair.eventlog import Event, EventKind, StudentTimeline, build_timelines
from lmsfair.features import (
    FEATURE_NAMES,
    Dataset,
    apply_scaler,
    dataset_average,
    extract_samples,
    featurize,
    fit_scaler,
    label_samples,
    normalize_grade,
)

T0 = 1_617_000_000_000
H = 3_600_000
SUBS = (EventKind.ASSIGNMENT_SUBMIT, EventKind.QUIZ_SUBMIT)


def ev(t, kind, obj="x", student=42, course=777, **kw):
    if kind is EventKind.FORUM_POST:
        kw.setdefault("text_length", 50)
    if kind is EventKind.GRADE_RECEIVED:
        kw.setdefault("points_awarded", 8.0)
        kw.setdefault("points_possible", 10.0)
    return Event(student, course, t, kind, obj, **kw)


def timeline(events):
    return build_timelines(events)[events[0].student]


def feats(sample):
    return dict(zip(FEATURE_NAMES, sample.features))


def test_feature_catalogue_has_27_unique_names():
    assert len(FEATURE_NAMES) == 27
    assert len(set(FEATURE_NAMES)) == 27
    assert FEATURE_NAMES[0] == "n_resource_access"
    assert FEATURE_NAMES[-1] == "std_lead_before_deadline"


@pytest.mark.parametrize("args, expected", [((8, 10), 0.8), ((0, 10), 0.0), ((10, 10), 1.0)])
def test_normalize_grade(args, expected):
    assert normalize_grade(*args) == expected


@pytest.mark.parametrize("args", [(1, 0), (11, 10), (-1, 10)])
def test_normalize_grade_rejects(args):
    with pytest.raises(ValueError):
        normalize_grade(*args)


def test_strict_precedence():
    evs = [ev(T0 + i * H, EventKind.RESOURCE_ACCESS, f"r{i}") for i in range(3)]
    evs.append(ev(T0 + 10 * H, EventKind.GRADE_RECEIVED, "a1"))
    evs += [ev(T0 + 10 * H, EventKind.RESOURCE_ACCESS, "same-ts"), ev(T0 + 11 * H, EventKind.RESOURCE_ACCESS)]
    (s,) = extract_samples(timeline(evs))
    assert feats(s)["n_resource_access"] == 3
    assert s.grade == 0.8


def test_grade_without_prior_events_is_all_zero():
    (s,) = extract_samples(timeline([ev(T0, EventKind.GRADE_RECEIVED)]))
    assert all(v == 0.0 for v in s.features)


def test_grades_at_same_timestamp_do_not_see_each_other():
    evs = [ev(T0, EventKind.GRADE_RECEIVED, "a"), ev(T0, EventKind.GRADE_RECEIVED, "b")]
    samples = extract_samples(timeline(evs))
    assert [feats(s)["n_prior_grades"] for s in samples] == [0, 0]


def test_ratio_on_time_and_lead():
    evs = [
        ev(T0, EventKind.ASSIGNMENT_SUBMIT, due_timestamp=T0 + 2 * H),
        ev(T0 + H, EventKind.QUIZ_SUBMIT, due_timestamp=T0),
        ev(T0 + 2 * H, EventKind.ASSIGNMENT_SUBMIT),
        ev(T0 + 5 * H, EventKind.GRADE_RECEIVED),
    ]
    f = feats(extract_samples(timeline(evs))[0])
    assert (f["n_on_time_submissions"], f["n_late_submissions"]) == (2, 1)
    assert f["ratio_on_time"] == pytest.approx(2 / 3)
    # leads: +2h and -1h; the undated submission has no lead
    assert f["mean_lead_before_deadline"] == pytest.approx(0.5)
    assert f["std_lead_before_deadline"] == pytest.approx(1.5)
    assert f["mean_gap_submission"] == pytest.approx(1.0)
    assert f["std_gap_submission"] == pytest.approx(0.0)


# independent oracle: recompute every feature of one grade from scratch


def oracle(events, grade_ts, gap_ms=30 * 60_000, window_ms=168 * H):
    prior = sorted((e for e in events if e.timestamp < grade_ts), key=lambda e: e.timestamp)

    def of(*kinds):
        return [e for e in prior if e.kind in kinds]

    def gaps(es):
        ts = [e.timestamp for e in es]
        g = [(b - a) / H for a, b in zip(ts, ts[1:])]
        return (statistics.fmean(g), statistics.pstdev(g)) if g else (0.0, 0.0)

    ra, subs, posts = of(EventKind.RESOURCE_ACCESS), of(*SUBS), of(EventKind.FORUM_POST)
    on_time = [e for e in subs if e.due_timestamp is None or e.timestamp <= e.due_timestamp]
    late = [e for e in subs if e not in on_time]
    days = {e.timestamp // 86_400_000 for e in prior}
    ts = [e.timestamp for e in prior]
    sessions = (1 + sum(b - a > gap_ms for a, b in zip(ts, ts[1:]))) if ts else 0
    leads = [(e.due_timestamp - e.timestamp) / H for e in subs if e.due_timestamp is not None]
    lo = grade_ts - window_ms
    out = {
        "n_resource_access": len(ra),
        "n_file_upload": len(of(EventKind.FILE_UPLOAD)),
        "n_file_edit": len(of(EventKind.FILE_EDIT)),
        "n_forum_post": len(posts),
        "n_assignment_submit": len(of(EventKind.ASSIGNMENT_SUBMIT)),
        "n_quiz_submit": len(of(EventKind.QUIZ_SUBMIT)),
        "n_distinct_resources": len({e.object_id for e in ra}),
        "n_active_days": len(days),
        "n_sessions": sessions,
        "n_prior_grades": len(of(EventKind.GRADE_RECEIVED)),
        "n_forum_post_min100": sum(e.text_length >= 100 for e in posts),
        "n_on_time_submissions": len(on_time),
        "n_late_submissions": len(late),
        "avg_resources_per_active_day": len(ra) / len(days) if days else 0.0,
        "avg_submissions_per_active_day": len(subs) / len(days) if days else 0.0,
        "ratio_on_time": len(on_time) / len(subs) if subs else 0.0,
        "n_resource_access_last7d": sum(lo <= e.timestamp for e in ra),
        "n_submissions_last7d": sum(lo <= e.timestamp for e in subs),
        "avg_forum_post_length": statistics.fmean(e.text_length for e in posts) if posts else 0.0,
        "time_first_event_to_grade": (grade_ts - ts[0]) / H if ts else 0.0,
        "time_last_event_to_grade": (grade_ts - ts[-1]) / H if ts else 0.0,
        "mean_lead_before_deadline": statistics.fmean(leads) if leads else 0.0,
        "std_lead_before_deadline": statistics.pstdev(leads) if leads else 0.0,
    }
    out["mean_gap_resource_access"], out["std_gap_resource_access"] = gaps(ra)
    out["mean_gap_submission"], out["std_gap_submission"] = gaps(subs)
    return out


NON_GRADE = [k for k in EventKind if k is not EventKind.GRADE_RECEIVED]


@st.composite
def course_events(draw, student=42, course=777):
    n = draw(st.integers(1, 40))
    out = []
    for i in range(n):
        # coarse time grid so timestamp ties and day boundaries both occur
        t = T0 + draw(st.integers(0, 400)) * 20 * 60_000
        kind = draw(st.sampled_from(NON_GRADE + [EventKind.GRADE_RECEIVED] * 2))
        kw = {}
        if kind is EventKind.FORUM_POST:
            kw["text_length"] = draw(st.integers(0, 300))
        if kind in SUBS and draw(st.booleans()):
            kw["due_timestamp"] = t + draw(st.integers(-100, 100)) * H
        obj = f"r{draw(st.integers(0, 5))}"
        out.append(ev(t, kind, obj, student=student, course=course, **kw))
    return out


@settings(max_examples=150, deadline=None)
@given(course_events())
def test_features_match_bruteforce_oracle(events):
    samples = extract_samples(timeline(events))
    grades = [e for e in events if e.kind is EventKind.GRADE_RECEIVED]
    assert len(samples) == len(grades)
    for s in samples:
        expected = oracle(events, s.grade_timestamp)
        got = feats(s)
        for name in FEATURE_NAMES:
            assert got[name] == pytest.approx(expected[name], rel=1e-9, abs=1e-9), name


def test_two_grades_interleaved():
    evs = [
        ev(T0, EventKind.RESOURCE_ACCESS, "p1"),
        ev(T0 + H, EventKind.ASSIGNMENT_SUBMIT, "a1", due_timestamp=T0 + 3 * H),
        ev(T0 + 2 * H, EventKind.GRADE_RECEIVED, "a1"),
        ev(T0 + 3 * H, EventKind.RESOURCE_ACCESS, "p1"),
        ev(T0 + 4 * H, EventKind.RESOURCE_ACCESS, "p2"),
        ev(T0 + 5 * H, EventKind.GRADE_RECEIVED, "a2"),
    ]
    s1, s2 = extract_samples(timeline(evs))
    for s in (s1, s2):
        for name, value in oracle(evs, s.grade_timestamp).items():
            assert feats(s)[name] == pytest.approx(value)
    assert feats(s2)["n_distinct_resources"] == 2
    assert feats(s2)["n_prior_grades"] == 1


@settings(max_examples=60, deadline=None)
@given(course_events(), st.data())
def test_no_leakage_from_later_events(events, data):
    samples = extract_samples(timeline(events))
    for s in samples:
        # rewrite everything at or after this grade, including other grades
        kept = [e for e in events if e.timestamp < s.grade_timestamp]
        extra = data.draw(course_events())
        shifted = [
            Event(e.student, e.course, s.grade_timestamp + (e.timestamp - T0), e.kind, e.object_id,
                  e.text_length, e.due_timestamp, e.points_awarded, e.points_possible)
            for e in extra
        ]
        target = ev(s.grade_timestamp, EventKind.GRADE_RECEIVED, "target")
        again = extract_samples(timeline(kept + [target] + shifted))
        match = [a for a in again if a.object_id == "target"]
        assert match[0].features == s.features


@settings(max_examples=40, deadline=None)
@given(course_events(student=1), course_events(student=2, course=5))
def test_additivity_over_students(a, b):
    joint = featurize(build_timelines(a + b))
    sa = extract_samples(timeline(a))
    sb = extract_samples(timeline(b))
    assert len(joint) == len(sa) + len(sb)
    alone = {(s.student, s.course, s.grade_timestamp, s.features) for s in sa + sb}
    together = {
        (int(joint.student[i]), int(joint.course[i]), int(joint.timestamp[i]), tuple(joint.X[i]))
        for i in range(len(joint))
    }
    assert alone == together


def test_labels():
    base = extract_samples(timeline([ev(T0, EventKind.GRADE_RECEIVED)]))[0]
    from dataclasses import replace

    samples = [replace(base, grade=g) for g in (0.70, 0.721, 0.9)]
    labelled = label_samples(samples, 0.721)
    assert [s.label for s in labelled] == [1, 0, 0]
    assert dataset_average(samples) == pytest.approx((0.70 + 0.721 + 0.9) / 3)


def test_featurize_labels_against_dataset_average():
    evs = []
    for student, awarded in [(1, 2.0), (2, 5.0), (3, 9.0)]:
        evs.append(ev(T0, EventKind.GRADE_RECEIVED, student=student, points_awarded=awarded))
    ds = featurize(build_timelines(evs))
    assert ds.average_grade == pytest.approx(16 / 30)
    assert ds.y.tolist() == [1, 1, 0]
    assert np.all(ds.y == (ds.grade < ds.average_grade))


def test_scaler_oracle():
    sc = fit_scaler(np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]))
    out = sc.transform(np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]))
    np.testing.assert_allclose(out[:, 0], [-1.224744871391589, 0, 1.224744871391589], atol=1e-12)
    assert out[:, 1].tolist() == [0, 0, 0]
    assert sc.std[1] == 0.0


def test_scaler_standardizes_training_set():
    rng = np.random.default_rng(0)
    X = rng.normal(3, 7, size=(500, 6))
    X[:, 2] = 4.0
    Z = fit_scaler(X).transform(X)
    assert np.all(np.abs(Z.mean(axis=0)) < 1e-9)
    sd = Z.std(axis=0)
    assert np.all(np.abs(sd[[0, 1, 3, 4, 5]] - 1) < 1e-9)
    assert sd[2] == 0


def test_scaler_fitted_on_train_leaves_test_off_center():
    rng = np.random.default_rng(1)
    train, test = rng.normal(0, 1, (100, 3)), rng.normal(2, 1, (50, 3))
    Z = apply_scaler(fit_scaler(train), test)
    assert np.all(np.abs(Z.mean(axis=0)) > 0.5)


def test_scaler_rejects_empty():
    with pytest.raises(ValueError):
        fit_scaler(np.empty((0, 3)))


def test_dataset_csv_round_trip():
    evs = [
        ev(T0, EventKind.RESOURCE_ACCESS, student=1),
        ev(T0 + H, EventKind.GRADE_RECEIVED, "a1", student=1, points_awarded=3.0),
        ev(T0 + H, EventKind.GRADE_RECEIVED, "a2", student=2, points_awarded=9.0),
    ]
    ds = featurize(build_timelines(evs))
    buf = io.StringIO()
    ds.write_csv(buf)
    back = Dataset.read_csv(io.StringIO(buf.getvalue()))
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.student, ds.student)
    assert back.feature_names == ds.feature_names
    assert math.isclose(back.average_grade, ds.average_grade)


def test_timeline_passed_directly():
    tl = StudentTimeline(9, {3: (ev(T0, EventKind.GRADE_RECEIVED, student=9, course=3),)})
    (s,) = extract_samples(tl)
    assert (s.student, s.course) == (9, 3)
