"""Summary index storage: append-only newline-JSON files plus a recent window.

Mapping rule: the kind of each field (number or string) is inferred from its
first occurrence and enforced afterwards; a doc that cannot be coerced to the
mapped kind goes to the quarantine file. Malformed lines (not a JSON object,
or missing the @ts/@index envelope) go to the dead-letter file. Nothing that
was acked is silently lost: every line ends up in an index file, quarantine,
or dead-letter.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
from collections import deque
from pathlib import Path

from ..timefmt import parse_iso_ns

log = logging.getLogger("receptor.store")

_SAFE = re.compile(r"[^A-Za-z0-9_.@-]")


def sanitize_index_name(name: str) -> str:
    """Deterministic filesystem-safe index name: unsafe chars become '_'."""
    cleaned = _SAFE.sub("_", name).lstrip(".")
    return cleaned or "_"


class SummaryIndex:
    def __init__(self, name: str, path: Path, window_docs: int, roll_bytes: int):
        self.name = name
        self.path = path
        self.mapping: dict[str, str] = {}  # field -> "number" | "string"
        self.window: deque = deque(maxlen=window_docs)  # (ts_ns, doc_dict)
        self.window_complete = True  # window still covers the whole index
        self.doc_count = 0
        self.roll_bytes = roll_bytes
        self._wlock = threading.Lock()
        self._f = open(path, "ab")
        self._size = self._f.tell()

    def kind_of(self, value) -> str:
        return "number" if isinstance(value, (int, float)) and not isinstance(value, bool) \
            else "string"

    def check_mapping(self, doc: dict):
        """Infer-first-wins mapping; returns a possibly coerced doc or None."""
        coerced = None
        for k, v in doc.items():
            if k.startswith("@"):
                continue
            kind = self.kind_of(v)
            want = self.mapping.get(k)
            if want is None:
                self.mapping[k] = kind
            elif kind != want:
                if want == "number":
                    try:
                        num = float(v)
                    except (TypeError, ValueError):
                        return None  # quarantine
                    coerced = dict(doc) if coerced is None else coerced
                    coerced[k] = num
                else:
                    coerced = dict(doc) if coerced is None else coerced
                    coerced[k] = str(v)
        return coerced if coerced is not None else doc

    def append(self, ts_ns: int, doc: dict, raw_line: bytes) -> None:
        self._f.write(raw_line + b"\n")
        self._size += len(raw_line) + 1
        with self._wlock:
            self.window.append((ts_ns, doc))
            self.doc_count += 1
            if self.doc_count > self.window.maxlen:
                self.window_complete = False  # the deque evicted its oldest doc
        if self._size >= self.roll_bytes:
            self._roll()

    def _roll(self) -> None:
        """Retention: keep one previous generation, drop older."""
        self._f.close()
        old = self.path.with_suffix(self.path.suffix + ".1")
        try:
            if old.exists():
                old.unlink()
            os.replace(self.path, old)
        except OSError as e:
            log.warning("roll of %s failed: %s", self.path, e)
        self._f = open(self.path, "ab")
        self._size = 0
        log.info("rolled index file %s", self.path)

    def flush(self) -> None:
        self._f.flush()

    def close(self) -> None:
        try:
            self._f.flush()
            self._f.close()
        except OSError:
            pass


class IndexStore:
    def __init__(self, data_dir, window_docs: int = 100_000, roll_bytes: int = 1 << 30):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.window_docs = window_docs
        self.roll_bytes = roll_bytes
        self.indexes: dict[str, SummaryIndex] = {}
        self._lock = threading.Lock()
        self.dead_letters = 0
        self.quarantined = 0
        self.ingested = 0
        self._dead = open(self.data_dir / "dead-letter.ndjson", "ab")
        self._quar = open(self.data_dir / "quarantine.ndjson", "ab")
        for p in sorted(self.data_dir.glob("*.index.ndjson")):
            name = p.name[:-len(".index.ndjson")]
            self._load_existing(name, p)

    def _load_existing(self, name: str, path: Path) -> None:
        idx = SummaryIndex(name, path, self.window_docs, self.roll_bytes)
        count = 0
        try:
            with open(path, "rb") as f:
                for raw in f:
                    raw = raw.strip()
                    if not raw:
                        continue
                    try:
                        doc = json.loads(raw)
                        ts = parse_iso_ns(doc["@ts"])
                    except (ValueError, KeyError):
                        continue
                    idx.check_mapping(doc)
                    idx.window.append((ts, doc))
                    count += 1
        except OSError:
            pass
        idx.doc_count = count
        idx.window_complete = count <= self.window_docs
        self.indexes[name] = idx

    # -- operations ------------------------------------------------------------

    def ensure_index(self, name: str) -> SummaryIndex:
        if not name:
            raise ValueError("empty index name")
        name = sanitize_index_name(name)
        with self._lock:
            idx = self.indexes.get(name)
            if idx is None:
                idx = SummaryIndex(name, self.data_dir / f"{name}.index.ndjson",
                                   self.window_docs, self.roll_bytes)
                self.indexes[name] = idx
            return idx

    def ingest_line(self, raw_line: bytes):
        """Route one summary line; returns (index_name, doc) or None."""
        try:
            doc = json.loads(raw_line)
            if not isinstance(doc, dict):
                raise ValueError("not an object")
            ts = parse_iso_ns(doc["@ts"])
            name = doc["@index"]
            if not isinstance(name, str) or not name:
                raise ValueError("bad @index")
        except (ValueError, KeyError):
            self.dead_letters += 1
            self._dead.write(raw_line + b"\n")
            return None
        idx = self.ensure_index(name)
        checked = idx.check_mapping(doc)
        if checked is None:
            self.quarantined += 1
            self._quar.write(raw_line + b"\n")
            return None
        if checked is not doc:
            raw_line = json.dumps(checked, separators=(",", ":"), ensure_ascii=False).encode()
        idx.append(ts, checked, raw_line)
        self.ingested += 1
        return idx.name, checked

    def query(self, name: str, from_ts_ns: int, to_ts_ns: int,
              limit: int = 1000, order: str = "asc") -> list[dict]:
        """Docs with @ts inside the closed interval, ordered, truncated."""
        idx = self.indexes.get(sanitize_index_name(name))
        if idx is None:
            raise KeyError(name)
        idx.flush()
        with idx._wlock:
            complete = idx.window_complete
            snapshot = list(idx.window) if complete else None
        if complete:
            hits = [d for ts, d in snapshot if from_ts_ns <= ts <= to_ts_ns]
            hits.sort(key=lambda d: d["@ts"])
        else:
            hits = self._scan_files(idx, from_ts_ns, to_ts_ns)
        if order == "desc":
            hits.reverse()
        return hits[:limit]

    def _scan_files(self, idx: SummaryIndex, lo: int, hi: int) -> list[dict]:
        out = []
        rolled = idx.path.with_suffix(idx.path.suffix + ".1")
        for p in (rolled, idx.path):
            if not p.exists():
                continue
            with open(p, "rb") as f:
                for raw in f:
                    raw = raw.strip()
                    if not raw:
                        continue
                    try:
                        doc = json.loads(raw)
                        ts = parse_iso_ns(doc["@ts"])
                    except (ValueError, KeyError):
                        continue
                    if lo <= ts <= hi:
                        out.append(doc)
        out.sort(key=lambda d: d["@ts"])
        return out

    def stats(self) -> dict:
        with self._lock:
            return {
                "indexes": {n: {"docs": i.doc_count, "mapping": dict(i.mapping)}
                            for n, i in self.indexes.items()},
                "ingested": self.ingested,
                "dead_letters": self.dead_letters,
                "quarantined": self.quarantined,
            }

    def flush(self) -> None:
        with self._lock:
            for idx in self.indexes.values():
                idx.flush()
            self._dead.flush()
            self._quar.flush()

    def close(self) -> None:
        self.flush()
        with self._lock:
            for idx in self.indexes.values():
                idx.close()
            self._dead.close()
            self._quar.close()
