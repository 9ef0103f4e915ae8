"""Segment catalog: a SQLite index of flat files by time interval and types."""

from __future__ import annotations

import json
import sqlite3
import threading
from dataclasses import dataclass
from pathlib import Path

from ..records import Interval

SCHEMA = """
CREATE TABLE IF NOT EXISTS segments (
    segment_id   INTEGER PRIMARY KEY,
    path         TEXT NOT NULL,
    min_ts_ns    INTEGER NOT NULL,
    max_ts_ns    INTEGER NOT NULL,
    record_count INTEGER NOT NULL,
    byte_size    INTEGER NOT NULL,
    sealed       INTEGER NOT NULL DEFAULT 1,
    type_ids     TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS idx_segments_interval ON segments (min_ts_ns, max_ts_ns);
"""


@dataclass(frozen=True)
class CatalogEntry:
    segment_id: int
    path: str
    min_ts_ns: int
    max_ts_ns: int
    type_set: frozenset
    record_count: int
    byte_size: int
    sealed: bool = True


class Catalog:
    """Transactional store of CatalogEntry rows; mutations serialized."""

    def __init__(self, db_path):
        self.db_path = str(db_path)
        self._lock = threading.Lock()
        self._conn = sqlite3.connect(self.db_path, check_same_thread=False)
        self._conn.executescript(SCHEMA)
        self._conn.commit()

    def insert(self, entry_fields: dict) -> CatalogEntry:
        """Persist one sealed segment entry atomically; returns it with its id."""
        with self._lock:
            cur = self._conn.execute(
                "INSERT INTO segments (path, min_ts_ns, max_ts_ns, record_count,"
                " byte_size, sealed, type_ids) VALUES (?,?,?,?,?,?,?)",
                (entry_fields["path"], entry_fields["min_ts_ns"], entry_fields["max_ts_ns"],
                 entry_fields["record_count"], entry_fields["byte_size"],
                 1 if entry_fields.get("sealed", True) else 0,
                 json.dumps(sorted(entry_fields["type_set"]))),
            )
            self._conn.commit()
            return self._row_to_entry(self._get_row(cur.lastrowid))

    def _get_row(self, segment_id):
        return self._conn.execute(
            "SELECT segment_id, path, min_ts_ns, max_ts_ns, record_count, byte_size,"
            " sealed, type_ids FROM segments WHERE segment_id = ?", (segment_id,)).fetchone()

    @staticmethod
    def _row_to_entry(row) -> CatalogEntry:
        return CatalogEntry(
            segment_id=row[0], path=row[1], min_ts_ns=row[2], max_ts_ns=row[3],
            record_count=row[4], byte_size=row[5], sealed=bool(row[6]),
            type_set=frozenset(json.loads(row[7])),
        )

    def lookup(self, interval: Interval, type_id: int = 0) -> list[CatalogEntry]:
        """Entries overlapping the closed interval and containing type_id.

        type_id 0 is the wildcard: interval overlap alone decides.
        """
        with self._lock:
            rows = self._conn.execute(
                "SELECT segment_id, path, min_ts_ns, max_ts_ns, record_count, byte_size,"
                " sealed, type_ids FROM segments"
                " WHERE min_ts_ns <= ? AND max_ts_ns >= ?"
                " ORDER BY min_ts_ns, segment_id",
                (interval.to_ts_ns, interval.from_ts_ns)).fetchall()
        entries = [self._row_to_entry(r) for r in rows]
        if type_id != 0:
            entries = [e for e in entries if type_id in e.type_set]
        return entries

    def all_entries(self) -> list[CatalogEntry]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT segment_id, path, min_ts_ns, max_ts_ns, record_count, byte_size,"
                " sealed, type_ids FROM segments ORDER BY min_ts_ns, segment_id").fetchall()
        return [self._row_to_entry(r) for r in rows]

    def paths(self) -> set[str]:
        with self._lock:
            return {r[0] for r in self._conn.execute("SELECT path FROM segments")}

    def remove(self, segment_id: int) -> None:
        with self._lock:
            self._conn.execute("DELETE FROM segments WHERE segment_id = ?", (segment_id,))
            self._conn.commit()

    def close(self) -> None:
        with self._lock:
            self._conn.close()
