"""Streaming ingestion of LMS event logs and location logs.

The canonical event CSV has nine columns::

    student_id,course_id,timestamp_ms,kind,object_id,text_length,
    due_timestamp_ms,points_awarded,points_possible

IDs are 5-digit zero-padded integers, timestamps are UTC epoch milliseconds.
Optional columns are left empty when they do not apply to the event kind.
Malformed rows never abort a parse; they are reported to an error sink as
``RowError(row_number, reason)`` where the header is row 1.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from operator import attrgetter
from typing import Callable, Iterable, Iterator

from .regions import RegionCode, parse_region

CANONICAL_COLUMNS = (
    "student_id",
    "course_id",
    "timestamp_ms",
    "kind",
    "object_id",
    "text_length",
    "due_timestamp_ms",
    "points_awarded",
    "points_possible",
)
LOCATION_COLUMNS = ("student_id", "region_code")
MAX_ID = 99999


class EventKind(str, Enum):
    RESOURCE_ACCESS = "ResourceAccess"
    FILE_UPLOAD = "FileUpload"
    FILE_EDIT = "FileEdit"
    FORUM_POST = "ForumPost"
    ASSIGNMENT_SUBMIT = "AssignmentSubmit"
    QUIZ_SUBMIT = "QuizSubmit"
    GRADE_RECEIVED = "GradeReceived"


SUBMISSION_KINDS = frozenset({EventKind.ASSIGNMENT_SUBMIT, EventKind.QUIZ_SUBMIT})
_KINDS = {k.value: k for k in EventKind}


class SchemaError(ValueError):
    """The header of a log does not match the expected schema."""


class EventValidationError(ValueError):
    pass


def format_id(value: int) -> str:
    return f"{value:05d}"


def parse_id(text: str) -> int:
    if len(text) != 5 or not text.isdigit():
        raise EventValidationError(f"bad id {text!r}: expected exactly 5 digits")
    return int(text)


@dataclass(frozen=True, slots=True)
class Event:
    """One timestamped student action in a course."""

    student: int
    course: int
    timestamp: int
    kind: EventKind
    object_id: str = ""
    text_length: int | None = None
    due_timestamp: int | None = None
    points_awarded: float | None = None
    points_possible: float | None = None

    def __post_init__(self):
        problem = _event_problem(self)
        if problem:
            raise EventValidationError(problem)


def _event_problem(e: Event) -> str | None:
    if not (0 <= e.student <= MAX_ID):
        return "student id out of range"
    if not (0 <= e.course <= MAX_ID):
        return "course id out of range"
    if e.timestamp <= 0:
        return "timestamp must be positive"
    kind = e.kind
    if not isinstance(kind, EventKind):
        return f"unknown kind {kind!r}"
    if kind is EventKind.FORUM_POST:
        if e.text_length is None:
            return "missing text_length for ForumPost"
        if e.text_length < 0:
            return "negative text_length"
    elif e.text_length is not None:
        return f"text_length not allowed for {kind.value}"
    if e.due_timestamp is not None:
        if kind not in SUBMISSION_KINDS:
            return f"due_timestamp not allowed for {kind.value}"
        if e.due_timestamp <= 0:
            return "due_timestamp must be positive"
    if kind is EventKind.GRADE_RECEIVED:
        if e.points_awarded is None or e.points_possible is None:
            return "missing points for GradeReceived"
        if not e.points_possible > 0:
            return "points_possible must be positive"
        if not e.points_awarded >= 0:
            return "points_awarded must be non-negative"
        if e.points_awarded > e.points_possible:
            return "awarded exceeds possible"
    elif e.points_awarded is not None or e.points_possible is not None:
        return f"points not allowed for {kind.value}"
    return None


@dataclass(frozen=True)
class RowError:
    row_number: int
    reason: str


@dataclass(frozen=True)
class EventLogSchema:
    """Column names (in canonical meaning order) and delimiter of an event log."""

    columns: tuple[str, ...] = CANONICAL_COLUMNS
    delimiter: str = ","


@dataclass(frozen=True, slots=True)
class LocationRecord:
    student: int
    region: RegionCode


@dataclass(frozen=True)
class StudentTimeline:
    student: int
    courses: dict[int, tuple[Event, ...]] = field(default_factory=dict)

    def __len__(self):
        return sum(len(v) for v in self.courses.values())

    def events(self) -> Iterator[Event]:
        for course in sorted(self.courses):
            yield from self.courses[course]


ErrorSink = Callable[[RowError], None]


def _sink(errors) -> ErrorSink:
    if errors is None:
        return lambda err: None
    if callable(errors):
        return errors
    return errors.append


def _text_stream(stream):
    if isinstance(stream, (str, bytes)):
        raise TypeError("pass an open file object, not a path or raw data")
    if isinstance(stream, io.TextIOBase):
        return stream
    mode = getattr(stream, "mode", "")
    if isinstance(mode, str) and mode and "b" not in mode:
        return stream
    return io.TextIOWrapper(stream, encoding="utf-8", newline="")


def _opt_int(text):
    return int(text) if text else None


def _opt_float(text):
    return float(text) if text else None


def parse_event_log(
    stream,
    schema: EventLogSchema = EventLogSchema(),
    errors: list | ErrorSink | None = None,
) -> Iterator[Event]:
    """Yield validated events from a delimiter-separated log, in file order.

    Single pass; nothing but the current row is held. ``errors`` may be a list
    or a callable receiving ``RowError`` values. A header that lacks any of
    the schema's columns raises ``SchemaError``.
    """
    report = _sink(errors)
    reader = csv.reader(_text_stream(stream), delimiter=schema.delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty input: no header row") from None
    except (csv.Error, UnicodeDecodeError) as exc:
        raise SchemaError(f"unreadable header: {exc}") from None
    header = [h.strip() for h in header]
    missing = [c for c in schema.columns if c not in header]
    if missing:
        raise SchemaError(f"header is missing columns {missing}")
    pos = [header.index(c) for c in schema.columns]
    width = len(header)
    identity = pos == list(range(len(schema.columns)))

    row_number = 1
    while True:
        try:
            row = next(reader)
        except StopIteration:
            return
        except (csv.Error, UnicodeDecodeError) as exc:
            row_number += 1
            report(RowError(row_number, f"unreadable row: {exc}"))
            continue
        row_number += 1
        if not row:
            continue
        if len(row) != width:
            # tolerate trailing empty fields
            if len(row) < width or any(row[width:]):
                report(RowError(row_number, f"expected {width} fields, got {len(row)}"))
                continue
        if identity:
            sid, cid, ts, kind, obj, tl, due, pa, pp = row[:9]
        else:
            sid, cid, ts, kind, obj, tl, due, pa, pp = (row[i] for i in pos)
        try:
            kind_value = _KINDS.get(kind)
            if kind_value is None:
                raise EventValidationError(f"unknown kind {kind!r}")
            event = Event(
                parse_id(sid),
                parse_id(cid),
                int(ts),
                kind_value,
                obj,
                _opt_int(tl),
                _opt_int(due),
                _opt_float(pa),
                _opt_float(pp),
            )
        except (ValueError, TypeError) as exc:
            report(RowError(row_number, str(exc)))
            continue
        yield event


def read_event_log(path, errors=None, schema: EventLogSchema = EventLogSchema()):
    """Eager convenience wrapper around :func:`parse_event_log` for a path."""
    with open(path, "rb") as fh:
        return list(parse_event_log(fh, schema, errors))


def _fmt_num(x):
    if x is None:
        return ""
    if float(x).is_integer() and abs(x) < 2**53:
        return str(int(x))
    return repr(float(x))


def event_row(e: Event) -> list[str]:
    return [
        format_id(e.student),
        format_id(e.course),
        str(e.timestamp),
        e.kind.value,
        e.object_id,
        "" if e.text_length is None else str(e.text_length),
        "" if e.due_timestamp is None else str(e.due_timestamp),
        _fmt_num(e.points_awarded),
        _fmt_num(e.points_possible),
    ]


def write_event_log(events: Iterable[Event], stream) -> int:
    """Write events in the canonical CSV format; returns the row count."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CANONICAL_COLUMNS)
    n = 0
    for e in events:
        writer.writerow(event_row(e))
        n += 1
    return n


def parse_location_log(stream, errors=None) -> Iterator[LocationRecord]:
    """Yield one ``LocationRecord`` per connection row, in file order.

    A leading ``student_id,region_code`` header is optional.
    """
    report = _sink(errors)
    reader = csv.reader(_text_stream(stream))
    row_number = 0
    for row in reader:
        row_number += 1
        if not row:
            continue
        if row_number == 1 and [c.strip() for c in row] == list(LOCATION_COLUMNS):
            continue
        if len(row) != 2:
            report(RowError(row_number, f"expected 2 fields, got {len(row)}"))
            continue
        try:
            record = LocationRecord(parse_id(row[0].strip()), parse_region(row[1]))
        except ValueError as exc:
            report(RowError(row_number, str(exc)))
            continue
        yield record


def read_location_log(path, errors=None):
    with open(path, "rb") as fh:
        return list(parse_location_log(fh, errors))


def write_location_log(records: Iterable[LocationRecord], stream) -> int:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(LOCATION_COLUMNS)
    n = 0
    for r in records:
        writer.writerow([format_id(r.student), r.region.value])
        n += 1
    return n


def write_errors(errors: Iterable[RowError], stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["row_number", "reason"])
    for err in errors:
        writer.writerow([err.row_number, err.reason])


def build_timelines(events: Iterable[Event]) -> dict[int, StudentTimeline]:
    """Group events by student and course, each course sorted by timestamp.

    Sorting is stable, so equal timestamps keep their input order. The
    returned mapping is ordered by student id.
    """
    grouped: dict[int, dict[int, list[Event]]] = defaultdict(lambda: defaultdict(list))
    for e in events:
        grouped[e.student][e.course].append(e)
    key = attrgetter("timestamp")
    timelines = {}
    for student in sorted(grouped):
        courses = {}
        for course in sorted(grouped[student]):
            seq = grouped[student][course]
            seq.sort(key=key)
            courses[course] = tuple(seq)
        timelines[student] = StudentTimeline(student, courses)
    return timelines
