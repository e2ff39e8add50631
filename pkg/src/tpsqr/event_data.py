"""Longitudinal event records, timespan aggregation and the lag-window influence function."""

from __future__ import annotations

import bisect
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class EventDataError(ValueError):
    """Malformed or contradictory event data."""


@dataclass(frozen=True)
class EventRecord:
    subject_id: str
    timestamp: float
    event_type: int

    def __post_init__(self):
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise EventDataError(
                f"subject {self.subject_id}: timestamp must be finite and >= 0, got {self.timestamp}"
            )
        if self.event_type < 1:
            raise EventDataError(
                f"subject {self.subject_id}: event_type must be >= 1, got {self.event_type}"
            )


@dataclass(frozen=True)
class Timespan:
    """A maximal run of one event type.

    ``t`` is the time of the first occurrence, ``o`` the event type and ``x``
    the number of occurrences after the first one.
    """

    t: float
    o: int
    x: int


@dataclass(frozen=True)
class SubjectSequence:
    subject_id: str
    spans: tuple[Timespan, ...] = ()

    def __len__(self) -> int:
        return len(self.spans)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.spans], dtype=float)

    @property
    def types(self) -> np.ndarray:
        return np.array([s.o for s in self.spans], dtype=np.int64)

    @property
    def counts(self) -> np.ndarray:
        return np.array([s.x for s in self.spans], dtype=np.int64)

    @property
    def duration(self) -> float:
        """Time between the first and the last span start."""
        if not self.spans:
            return 0.0
        return self.spans[-1].t - self.spans[0].t

    def expand(self) -> list[EventRecord]:
        """Expand back to raw events, all ``x + 1`` occurrences placed at ``t``."""
        return [
            EventRecord(self.subject_id, s.t, s.o)
            for s in self.spans
            for _ in range(s.x + 1)
        ]


@dataclass(frozen=True)
class LagWindows:
    """Lag thresholds ``0 = tau_0 < tau_1 < ... < tau_L``."""

    thresholds: tuple[float, ...] = field(default=())

    def __post_init__(self):
        th = tuple(float(v) for v in self.thresholds)
        object.__setattr__(self, "thresholds", th)
        if len(th) < 2:
            raise ValueError("need at least two thresholds (L >= 1)")
        if th[0] != 0.0:
            raise ValueError(f"first threshold must be 0, got {th[0]}")
        if any(not math.isfinite(v) for v in th):
            raise ValueError("thresholds must be finite")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError(f"thresholds must be strictly increasing: {th}")

    @property
    def L(self) -> int:
        return len(self.thresholds) - 1

    @property
    def max_lag(self) -> float:
        return self.thresholds[-1]

    def scaled(self, factor: float) -> "LagWindows":
        """Windows with every threshold multiplied by ``factor`` (> 0)."""
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        return LagWindows(tuple(factor * v for v in self.thresholds))

    def window_of(self, tau: float) -> int:
        """0-based window index containing ``tau``, or -1 when ``tau >= tau_L``."""
        if tau < 0:
            raise ValueError(f"lag must be nonnegative, got {tau}")
        if tau >= self.thresholds[-1]:
            return -1
        # left-closed windows
        return bisect.bisect_right(self.thresholds, tau) - 1


def influence(tau: float, windows: LagWindows) -> np.ndarray:
    """One-hot indicator of the lag window containing ``tau``.

    Component ``l`` is 1 iff ``tau_{l-1} <= tau < tau_l``; the vector is all
    zeros once ``tau`` reaches the last threshold.
    """
    out = np.zeros(windows.L)
    k = windows.window_of(tau)
    if k >= 0:
        out[k] = 1.0
    return out


def aggregate(
    events: Sequence[EventRecord], t_ambiguity: float = 0.0, subject_id: str | None = None
) -> SubjectSequence:
    """Collapse one subject's events into single-type timespans.

    Consecutive events of the same type form one span. With a positive
    ``t_ambiguity``, a span of type A that was interrupted by a single span of
    another type starting less than ``t_ambiguity`` after A's first occurrence
    keeps absorbing later A events, since the relative order of the two first
    occurrences is not trusted.

    Raises
    ------
    EventDataError
        If two events of different types share a timestamp, or the events
        belong to more than one subject.
    """
    if t_ambiguity < 0:
        raise ValueError("t_ambiguity must be nonnegative")
    if not events:
        return SubjectSequence(subject_id if subject_id is not None else "", ())
    sid = events[0].subject_id if subject_id is None else subject_id
    if any(e.subject_id != sid for e in events):
        raise EventDataError("aggregate() expects the events of a single subject")

    ordered = sorted(events, key=lambda e: e.timestamp)
    # [t, o, x] lists, mutated in place while scanning
    spans: list[list] = []
    prev = None
    for ev in ordered:
        if prev is not None and ev.timestamp == prev.timestamp and ev.event_type != prev.event_type:
            raise EventDataError(
                f"subject {sid}: events of types {prev.event_type} and {ev.event_type} "
                f"share timestamp {ev.timestamp}"
            )
        prev = ev
        if spans and spans[-1][1] == ev.event_type:
            spans[-1][2] += 1
        elif (
            len(spans) >= 2
            and spans[-2][1] == ev.event_type
            and spans[-1][0] - spans[-2][0] < t_ambiguity
        ):
            spans[-2][2] += 1
        else:
            spans.append([ev.timestamp, ev.event_type, 0])
    return SubjectSequence(sid, tuple(Timespan(float(t), int(o), int(x)) for t, o, x in spans))


def read_events_csv(path: str | Path) -> dict[str, list[EventRecord]]:
    """Read ``subject_id,timestamp,event_type`` rows grouped by subject.

    Subjects keep their order of first appearance. Malformed rows and
    cross-type timestamp ties raise :class:`EventDataError` naming the
    1-based line number.
    """
    by_subject: dict[str, list[EventRecord]] = {}
    seen: dict[tuple[str, float], tuple[int, int]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return by_subject
        if [h.strip() for h in header] != ["subject_id", "timestamp", "event_type"]:
            raise EventDataError(f"line 1: expected header subject_id,timestamp,event_type, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise EventDataError(f"line {lineno}: expected 3 fields, got {len(row)}")
            sid, ts, et = (c.strip() for c in row)
            try:
                rec = EventRecord(sid, float(ts), int(et))
            except ValueError as exc:
                raise EventDataError(f"line {lineno}: {exc}") from None
            first = seen.setdefault((sid, rec.timestamp), (lineno, rec.event_type))
            if first[1] != rec.event_type:
                raise EventDataError(
                    f"line {lineno}: subject {sid} has event types {first[1]} (line {first[0]}) "
                    f"and {rec.event_type} at the same timestamp {rec.timestamp}"
                )
            by_subject.setdefault(sid, []).append(rec)
    return by_subject


def read_header(path: str | Path) -> dict:
    """Dataset sidecar: ``{"p": int, "time_unit": str}``."""
    with open(path, encoding="utf-8") as fh:
        hdr = json.load(fh)
    if not isinstance(hdr.get("p"), int) or hdr["p"] < 1:
        raise EventDataError(f"{path}: 'p' must be a positive integer")
    hdr.setdefault("time_unit", "unspecified")
    return hdr


def write_header(path: str | Path, p: int, time_unit: str = "unspecified") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"p": int(p), "time_unit": time_unit}, fh, indent=2)
        fh.write("\n")


def write_events_csv(path: str | Path, events: Iterable[EventRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "timestamp", "event_type"])
        for e in events:
            w.writerow([e.subject_id, _fmt(e.timestamp), e.event_type])


def write_sequences_csv(path: str | Path, sequences: Iterable[SubjectSequence]) -> None:
    """Aggregated output: ``subject_id,span_index,t,o,x`` with 1-based span index."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "span_index", "t", "o", "x"])
        for seq in sequences:
            for j, s in enumerate(seq.spans, start=1):
                w.writerow([seq.subject_id, j, _fmt(s.t), s.o, s.x])


def read_sequences_csv(path: str | Path) -> list[SubjectSequence]:
    rows: dict[str, list[tuple[int, Timespan]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                span = Timespan(float(row["t"]), int(row["o"]), int(row["x"]))
                idx = int(row["span_index"])
            except (KeyError, TypeError, ValueError) as exc:
                raise EventDataError(f"line {lineno}: {exc}") from None
            rows.setdefault(row["subject_id"], []).append((idx, span))
    return [
        SubjectSequence(sid, tuple(s for _, s in sorted(items, key=lambda it: it[0])))
        for sid, items in rows.items()
    ]


def validate_types(sequences: Iterable[SubjectSequence], p: int) -> None:
    for seq in sequences:
        for s in seq.spans:
            if not 1 <= s.o <= p:
                raise EventDataError(f"subject {seq.subject_id}: event type {s.o} outside 1..{p}")


def _fmt(v: float) -> str:
    return repr(float(v)) if not float(v).is_integer() else str(int(v))
