"""Drill-down query lifecycle: state machine, FIFO queue, journal."""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field

QUEUED, RUNNING, DONE, CANCELLED, FAILED = "QUEUED", "RUNNING", "DONE", "CANCELLED", "FAILED"
TERMINAL = {DONE, CANCELLED, FAILED}
LEGAL = {
    QUEUED: {RUNNING, CANCELLED},
    RUNNING: {DONE, CANCELLED, FAILED},
    DONE: set(),
    CANCELLED: set(),
    FAILED: set(),
}


class IllegalTransition(RuntimeError):
    pass


@dataclass
class NodeProgress:
    segments_done: int = 0
    segments_total: int | None = None
    records: int = 0
    finished: bool = False

    @property
    def fraction(self) -> float:
        if self.segments_total is None:
            return 0.0
        if self.segments_total == 0:
            return 1.0
        return min(1.0, self.segments_done / self.segments_total)


@dataclass
class DrillQuery:
    query_id: str
    type_name: str
    type_id: int
    from_ts_ns: int
    to_ts_ns: int
    state: str = QUEUED
    created_at: float = field(default_factory=time.time)
    finished_at: float | None = None
    partial: bool = False
    error: str | None = None
    progress: dict = field(default_factory=dict)  # node addr -> NodeProgress
    cancel_event: threading.Event = field(default_factory=threading.Event)

    def to_doc(self) -> dict:
        return {
            "query_id": self.query_id,
            "type": self.type_name,
            "from_ts_ns": self.from_ts_ns,
            "to_ts_ns": self.to_ts_ns,
            "state": self.state,
            "created_at": self.created_at,
            "finished_at": self.finished_at,
            "partial": self.partial,
            "error": self.error,
            "records": sum(p.records for p in self.progress.values()),
            "nodes": {
                addr: {"segments_done": p.segments_done, "segments_total": p.segments_total,
                       "records": p.records, "fraction": p.fraction}
                for addr, p in self.progress.items()
            },
        }


class QueryStore:
    """Owns all query state; every mutation goes through its lock.

    State changes are journaled as JSON lines so a restarted controller can
    recover queued work; queries that were RUNNING at the crash are marked
    FAILED (node scans are not resumable).
    """

    def __init__(self, journal_path=None):
        self._lock = threading.Lock()
        self._queries: dict[str, DrillQuery] = {}
        self._fifo: list[str] = []
        self._journal_path = journal_path
        self._journal = None
        if journal_path:
            recovered = self._recover()
            self._journal = open(journal_path, "a", encoding="utf-8")
            for q in recovered:
                self._log(q)

    def _recover(self) -> list[DrillQuery]:
        changed = []
        try:
            f = open(self._journal_path, "r", encoding="utf-8")
        except FileNotFoundError:
            return changed
        with f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    doc = json.loads(line)
                except json.JSONDecodeError:
                    continue
                q = self._queries.get(doc["query_id"])
                if q is None:
                    q = DrillQuery(
                        query_id=doc["query_id"], type_name=doc.get("type", "*"),
                        type_id=doc.get("type_id", 0), from_ts_ns=doc.get("from_ts_ns", 0),
                        to_ts_ns=doc.get("to_ts_ns", 0))
                    self._queries[q.query_id] = q
                q.state = doc.get("state", q.state)
                q.partial = doc.get("partial", q.partial)
                q.error = doc.get("error", q.error)
        for q in self._queries.values():
            if q.state == RUNNING:
                q.state = FAILED
                q.error = "controller restarted while query was running"
                q.finished_at = time.time()
                changed.append(q)
            elif q.state == QUEUED:
                self._fifo.append(q.query_id)
        return changed

    def _log(self, q: DrillQuery) -> None:
        if self._journal is None:
            return
        doc = {"query_id": q.query_id, "type": q.type_name, "type_id": q.type_id,
               "from_ts_ns": q.from_ts_ns, "to_ts_ns": q.to_ts_ns, "state": q.state,
               "partial": q.partial, "error": q.error}
        self._journal.write(json.dumps(doc, separators=(",", ":")) + "\n")
        self._journal.flush()

    # -- operations -------------------------------------------------------------

    def submit(self, type_name: str, type_id: int, from_ts_ns: int, to_ts_ns: int) -> DrillQuery:
        q = DrillQuery(query_id=str(uuid.uuid4()), type_name=type_name, type_id=type_id,
                       from_ts_ns=from_ts_ns, to_ts_ns=to_ts_ns)
        with self._lock:
            self._queries[q.query_id] = q
            self._fifo.append(q.query_id)
            self._log(q)
        return q

    def get(self, query_id: str) -> DrillQuery | None:
        with self._lock:
            return self._queries.get(query_id)

    def all(self) -> list[DrillQuery]:
        with self._lock:
            return sorted(self._queries.values(), key=lambda q: q.created_at)

    def transition(self, query_id: str, new_state: str, *, partial: bool | None = None,
                   error: str | None = None) -> DrillQuery:
        with self._lock:
            q = self._queries[query_id]
            if new_state not in LEGAL[q.state]:
                raise IllegalTransition(f"{q.state} -> {new_state} for {query_id}")
            q.state = new_state
            if partial is not None:
                q.partial = partial
            if error is not None:
                q.error = error
            if new_state in TERMINAL:
                q.finished_at = time.time()
                if query_id in self._fifo:
                    self._fifo.remove(query_id)
            self._log(q)
            return q

    def next_queued(self) -> DrillQuery | None:
        """Head of the FIFO still in QUEUED state, without dequeuing."""
        with self._lock:
            for qid in self._fifo:
                q = self._queries[qid]
                if q.state == QUEUED:
                    return q
            return None

    def running_count(self) -> int:
        with self._lock:
            return sum(1 for q in self._queries.values() if q.state == RUNNING)

    def close(self) -> None:
        with self._lock:
            if self._journal:
                self._journal.close()
                self._journal = None
