"""Append-only NDJSON store for recorded envelopes.

One JSON object per line, payload bytes base64-encoded. Lines are written
through a buffered file handle; ``flush`` makes everything appended so far
visible to readers. Reopening an existing file continues its sequence.
"""

from __future__ import annotations

import base64
import json
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from fleetsim.bus import matches, validate_pattern


class StoreError(Exception):
    pass


class StoreIOError(StoreError):
    """Retryable write failure."""


class StoreClosedError(StoreError):
    pass


@dataclass(frozen=True, slots=True)
class RecordEntry:
    store_sequence: int
    topic: str
    publish_time: int
    ingest_time: int
    schema_tag: str
    payload: bytes

    def to_json(self) -> str:
        return json.dumps(
            {
                "store_sequence": self.store_sequence,
                "topic": self.topic,
                "publish_time": self.publish_time,
                "ingest_time": self.ingest_time,
                "schema_tag": self.schema_tag,
                "payload": base64.b64encode(self.payload).decode("ascii"),
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str, decode_payload: bool = True) -> RecordEntry:
        obj = json.loads(line)
        return cls(
            store_sequence=obj["store_sequence"],
            topic=obj["topic"],
            publish_time=obj["publish_time"],
            ingest_time=obj["ingest_time"],
            schema_tag=obj["schema_tag"],
            payload=base64.b64decode(obj["payload"]) if decode_payload else b"",
        )


@dataclass
class SessionStats:
    session_id: str
    entries_written: int = 0
    bytes_written: int = 0
    wall_clock_write_time: float = 0.0
    dropped: int = 0
    appended: int = 0

    def as_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "entries_written": self.entries_written,
            "bytes_written": self.bytes_written,
            "wall_clock_write_time": self.wall_clock_write_time,
            "dropped": self.dropped,
        }


def store_filename(correlation_key: str, revision: int) -> str:
    return f"recording_{correlation_key}_{revision}.ndjson"


class RecordStore:
    """Single-writer store bound to one file; the file stem is the session id."""

    def __init__(self, path: str | os.PathLike) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.session_id = self.path.stem
        self._next_seq = 0
        if self.path.exists():
            for entry in iter_entries(self.path, decode_payload=False):
                self._next_seq = entry.store_sequence + 1
        self._fh = open(self.path, "a", encoding="ascii")
        self._stats = SessionStats(self.session_id)
        self._fail_budget = 0

    @property
    def closed(self) -> bool:
        return self._fh is None

    def inject_io_failures(self, count: int) -> None:
        """Make the next ``count`` append attempts raise StoreIOError (test hook)."""
        self._fail_budget = count

    def append(
        self,
        topic: str,
        publish_time: int,
        ingest_time: int,
        schema_tag: str,
        payload: bytes,
    ) -> int:
        if self._fh is None:
            raise StoreClosedError(f"store {self.path} is closed")
        if self._fail_budget > 0:
            self._fail_budget -= 1
            raise StoreIOError(f"injected write failure on {self.path}")
        started = time.perf_counter()
        entry = RecordEntry(self._next_seq, topic, publish_time, ingest_time, schema_tag, bytes(payload))
        line = entry.to_json() + "\n"
        self._fh.write(line)
        self._next_seq += 1
        self._stats.appended += 1
        self._stats.entries_written += 1
        self._stats.bytes_written += len(line)
        self._stats.wall_clock_write_time += time.perf_counter() - started
        return entry.store_sequence

    def record_drop(self) -> None:
        self._stats.appended += 1
        self._stats.dropped += 1

    def flush(self) -> None:
        if self._fh is None:
            return
        started = time.perf_counter()
        self._fh.flush()
        self._stats.wall_clock_write_time += time.perf_counter() - started

    def close(self) -> None:
        if self._fh is not None:
            self.flush()
            self._fh.close()
            self._fh = None

    def stats(self, session_id: str | None = None) -> SessionStats:
        if session_id is not None and session_id != self.session_id:
            raise StoreError(f"unknown session {session_id!r}")
        return SessionStats(**{k: getattr(self._stats, k) for k in self._stats.__dataclass_fields__})

    def query(self, pattern: str, start: int, end: int) -> list[RecordEntry]:
        self.flush()
        return query_file(self.path, pattern, start, end)

    def __enter__(self) -> RecordStore:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def iter_entries(path: str | os.PathLike, decode_payload: bool = True) -> Iterator[RecordEntry]:
    with open(path, encoding="ascii") as fh:
        for line in fh:
            if line.strip():
                yield RecordEntry.from_json(line, decode_payload)


def query_file(
    path: str | os.PathLike,
    pattern: str,
    start: int,
    end: int,
    decode_payload: bool = True,
) -> list[RecordEntry]:
    if start > end:
        raise StoreError(f"empty interval: from={start} > to={end}")
    segments = validate_pattern(pattern)
    out = [
        e
        for e in iter_entries(path, decode_payload)
        if start <= e.publish_time <= end and matches(segments, e.topic)
    ]
    out.sort(key=lambda e: (e.publish_time, e.store_sequence))
    return out


_STORE_NAME = re.compile(r"^recording_(?P<key>.+)_(?P<rev>\d+)\.ndjson$")


def parse_store_filename(name: str) -> tuple[str, int] | None:
    m = _STORE_NAME.match(name)
    if m is None:
        return None
    return m.group("key"), int(m.group("rev"))
