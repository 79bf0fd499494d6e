"""Transaction histories: events, recording and the JSON-lines trace format.

One event per line, fields in a fixed order::

    {"seq": 3, "tx": 1, "thread": 0, "kind": "read", "loc": 0, "value": "5"}

``value`` is the textual form of the value (see :mod:`otm.syntax`); for a
``merge`` event it holds the id of the absorbing transaction.
"""

from __future__ import annotations

import enum
import itertools
import json
import threading
from dataclasses import dataclass
from typing import Any, Iterable


class EventKind(str, enum.Enum):
    BEGIN = "begin"
    READ = "read"
    WRITE = "write"
    COMMIT = "commit"
    ABORT = "abort"
    MERGE = "merge"
    NEWLOC = "newloc"


@dataclass(frozen=True)
class Event:
    seq: int
    tx: int
    thread: int | None
    kind: EventKind
    loc: int | None = None
    value: Any = None
    into: int | None = None


class MalformedHistory(ValueError):
    pass


def _encode_value(v: Any) -> str | None:
    if v is None:
        return None
    from otm.syntax import print_expr

    try:
        return print_expr(v)
    except ValueError:
        return repr(v)


def _decode_value(text: str | None) -> Any:
    if text is None:
        return None
    from otm.syntax import parse_value

    try:
        return parse_value(text)
    except ValueError:
        return text


def event_to_json(ev: Event) -> str:
    value = str(ev.into) if ev.kind is EventKind.MERGE else _encode_value(ev.value)
    record = {
        "seq": ev.seq,
        "tx": ev.tx,
        "thread": ev.thread,
        "kind": ev.kind.value,
        "loc": ev.loc,
        "value": value,
    }
    return json.dumps(record, ensure_ascii=False)


def event_from_json(line: str) -> Event:
    try:
        rec = json.loads(line)
        kind = EventKind(rec["kind"])
        if kind is EventKind.MERGE:
            return Event(rec["seq"], rec["tx"], rec["thread"], kind, into=int(rec["value"]))
        return Event(rec["seq"], rec["tx"], rec["thread"], kind, rec["loc"], _decode_value(rec["value"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise MalformedHistory(f"bad trace line {line!r}: {exc}") from exc


def dumps(events: Iterable[Event]) -> str:
    return "".join(event_to_json(ev) + "\n" for ev in events)


def loads(text: str) -> list[Event]:
    return [event_from_json(line) for line in text.splitlines() if line.strip()]


def write_trace(path, events: Iterable[Event]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(events))


def read_trace(path) -> list[Event]:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


class Recorder:
    """Append-only, thread-safe event sink with a total sequence order."""

    def __init__(self, start: int = 0):
        self._lock = threading.Lock()
        self._counter = itertools.count(start)
        self._events: list[Event] = []

    def log(self, tx: int, thread: int | None, kind: EventKind, loc=None, value=None, into=None) -> Event:
        with self._lock:
            ev = Event(next(self._counter), tx, thread, kind, loc, value, into)
            self._events.append(ev)
            return ev

    def discard(self, events: Iterable[Event]) -> None:
        """Drop events of an undone section (sequence numbers are not reused)."""
        drop = {id(e) for e in events}
        if not drop:
            return
        with self._lock:
            n = len(drop)
            tail = self._events[-n:]
            if len(tail) == n and all(id(e) in drop for e in tail):
                del self._events[-n:]  # the usual case: an undone suffix
            else:
                self._events = [e for e in self._events if id(e) not in drop]

    def events(self) -> list[Event]:
        with self._lock:
            return list(self._events)
