import io
import random
import tracemalloc

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmsfair.eventlog import (
    CANONICAL_COLUMNS,
    Event,
    EventKind,
    EventValidationError,
    LocationRecord,
    SchemaError,
    build_timelines,
    parse_event_log,
    parse_location_log,
    write_errors,
    write_event_log,
)
from lmsfair.regions import RegionCode

HEADER = ",".join(CANONICAL_COLUMNS) + "\n"


def parse(text):
    errors = []
    events = list(parse_event_log(io.BytesIO(text.encode()), errors=errors))
    return events, errors


def test_resource_access_row():
    events, errors = parse(HEADER + "00042,00777,1617000000000,ResourceAccess,page_12,,,,\n")
    assert errors == []
    (e,) = events
    assert (e.student, e.course, e.kind, e.object_id) == (42, 777, EventKind.RESOURCE_ACCESS, "page_12")
    assert e.timestamp == 1617000000000


def test_trailing_empty_field_is_tolerated():
    events, errors = parse(HEADER + "00042,00777,1617000000000,ResourceAccess,page_12,,,,,\n")
    assert errors == [] and len(events) == 1


def test_grade_row_sets_points():
    events, errors = parse(HEADER + "00042,00777,1617000000000,GradeReceived,a01,,,8,10\n")
    assert errors == []
    assert events[0].points_awarded == 8.0
    assert events[0].points_possible == 10.0


@pytest.mark.parametrize(
    "row, reason",
    [
        ("00042,00777,1617000000000,GradeReceived,a01,,,12,10", "awarded exceeds possible"),
        ("0042,00777,1617000000000,ResourceAccess,x,,,,", "5 digits"),
        ("00042,777777,1617000000000,ResourceAccess,x,,,,", "5 digits"),
        ("00042,00777,1617000000000,Teleport,x,,,,", "unknown kind"),
        ("00042,00777,1617000000000,ForumPost,x,,,,", "missing text_length"),
        ("00042,00777,1617000000000,GradeReceived,x,,,8,", "missing points"),
        ("00042,00777,1617000000000,ResourceAccess,x,5,,,", "text_length not allowed"),
        ("00042,00777,1617000000000,ResourceAccess,x,,1617000000001,,", "due_timestamp not allowed"),
        ("00042,00777,0,ResourceAccess,x,,,,", "timestamp must be positive"),
        ("00042,00777,abc,ResourceAccess,x,,,,", "invalid literal"),
        ("00042,00777,1617000000000,ResourceAccess", "expected 9 fields"),
    ],
)
def test_row_errors_are_reported_not_dropped(row, reason):
    good = "00001,00002,1617000000000,ResourceAccess,y,,,,"
    events, errors = parse(HEADER + good + "\n" + row + "\n" + good + "\n")
    assert len(events) == 2
    assert len(errors) == 1
    assert errors[0].row_number == 3
    assert reason in errors[0].reason


def test_header_problems_are_fatal():
    with pytest.raises(SchemaError):
        parse("")
    with pytest.raises(SchemaError):
        parse("student_id,course_id\n00001,00002\n")


def test_columns_may_be_reordered():
    cols = list(CANONICAL_COLUMNS)[::-1]
    row = dict(zip(CANONICAL_COLUMNS, ["00042", "00777", "1617000000000", "QuizSubmit", "q1", "", "1617000001000", "", ""]))
    text = ",".join(cols) + "\n" + ",".join(row[c] for c in cols) + "\n"
    events, errors = parse(text)
    assert errors == []
    assert events[0].due_timestamp == 1617000001000


def test_error_sink_callable_and_csv():
    seen = []
    list(parse_event_log(io.BytesIO((HEADER + "x\n").encode()), errors=seen.append))
    out = io.StringIO()
    write_errors(seen, out)
    assert out.getvalue().splitlines() == ["row_number,reason", '2,"expected 9 fields, got 1"']


def test_direct_construction_validates():
    with pytest.raises(EventValidationError):
        Event(1, 2, 3, EventKind.GRADE_RECEIVED, "a", points_awarded=2.0, points_possible=1.0)
    with pytest.raises(EventValidationError):
        Event(100000, 2, 3, EventKind.RESOURCE_ACCESS)


kinds = st.sampled_from(list(EventKind))


@st.composite
def events_strategy(draw):
    kind = draw(kinds)
    kw = {}
    if kind is EventKind.FORUM_POST:
        kw["text_length"] = draw(st.integers(0, 5000))
    if kind in (EventKind.ASSIGNMENT_SUBMIT, EventKind.QUIZ_SUBMIT):
        kw["due_timestamp"] = draw(st.none() | st.integers(1, 2**45))
    if kind is EventKind.GRADE_RECEIVED:
        possible = draw(st.floats(0.01, 1000, allow_nan=False))
        kw["points_possible"] = possible
        kw["points_awarded"] = draw(st.floats(0, 1, allow_nan=False)) * possible
    obj = draw(st.text(alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\r\x00"), max_size=12))
    return Event(
        draw(st.integers(0, 99999)), draw(st.integers(0, 99999)), draw(st.integers(1, 2**45)), kind, obj, **kw
    )


@settings(max_examples=200, deadline=None)
@given(st.lists(events_strategy(), max_size=30))
def test_csv_round_trip(events):
    buf = io.StringIO()
    write_event_log(events, buf)
    parsed, errors = parse(buf.getvalue())
    assert errors == []
    assert parsed == events


def test_build_timelines_sorts_and_keeps_tie_order():
    t = 1_617_000_000_000
    evs = [
        Event(42, 777, t + 3, EventKind.RESOURCE_ACCESS, "c"),
        Event(42, 777, t + 1, EventKind.RESOURCE_ACCESS, "a"),
        Event(42, 777, t + 2, EventKind.RESOURCE_ACCESS, "b1"),
        Event(42, 777, t + 2, EventKind.RESOURCE_ACCESS, "b2"),
        Event(7, 777, t, EventKind.FILE_EDIT, "z"),
    ]
    tls = build_timelines(evs)
    assert list(tls) == [7, 42]
    assert [e.object_id for e in tls[42].courses[777]] == ["a", "b1", "b2", "c"]
    assert sum(len(tl) for tl in tls.values()) == len(evs)


@settings(max_examples=50, deadline=None)
@given(st.lists(events_strategy(), max_size=60))
def test_build_timelines_is_a_permutation(events):
    tls = build_timelines(events)
    out = [e for tl in tls.values() for e in tl.events()]
    assert sorted(map(repr, out)) == sorted(map(repr, events))
    for tl in tls.values():
        for seq in tl.courses.values():
            assert all(e.student == tl.student for e in seq)
            assert all(a.timestamp <= b.timestamp for a, b in zip(seq, seq[1:]))


def test_location_log_examples():
    text = "student_id,region_code\n00042,NCR\n00042,R07\n00042,XYZ\n"
    errors = []
    recs = list(parse_location_log(io.BytesIO(text.encode()), errors))
    assert recs == [LocationRecord(42, RegionCode.NCR), LocationRecord(42, RegionCode.R07)]
    assert len(errors) == 1 and "unknown region code" in errors[0].reason
    # header is optional
    assert list(parse_location_log(io.BytesIO(b"00042,NCR\n"))) == [LocationRecord(42, RegionCode.NCR)]


def _log_bytes(n_rows, seed=0):
    rng = random.Random(seed)
    lines = [HEADER]
    for i in range(n_rows):
        lines.append(f"{rng.randint(0, 99999):05d},00777,{1617000000000 + i},ResourceAccess,page_{i % 50},,,,\n")
    return "".join(lines).encode()


def _peak_while_parsing(data):
    tracemalloc.start()
    n = 0
    for _ in parse_event_log(io.BytesIO(data)):
        n += 1
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return n, peak


def test_streaming_memory_does_not_grow_with_input():
    small = _log_bytes(5_000)
    large = _log_bytes(50_000)
    # input buffers are allocated before tracing starts
    n_small, peak_small = _peak_while_parsing(small)
    n_large, peak_large = _peak_while_parsing(large)
    assert (n_small, n_large) == (5_000, 50_000)
    assert peak_large < 2 * peak_small
