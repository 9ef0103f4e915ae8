"""Flat-file segment storage with an asynchronous, throttled flusher.

Records accumulate in an ACTIVE in-memory buffer; when it cannot fit the next
record (or an idle/shutdown flush forces it) the buffer is handed to the
flusher thread and the next free pool buffer becomes ACTIVE. Appends only
block when every pool buffer is in flight, which is exactly the backpressure
the TCP ingest loop relies on.

Scans never touch the ACTIVE buffer: they read sealed segment files in fixed
chunks, honor a cancel token at least once per chunk, and self-pace to the
configured disk-bandwidth headroom so a long read cannot starve the writer.

An optional shared "drive" token bucket emulates a bandwidth-limited disk:
flush writes, scan reads and calibration all acquire from it, giving the
deterministic rate-limited file target used by isolation tests.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

from ..records import HEADER_SIZE, Interval, TruncatedRecord, _TS_TYPE_SRC_LEN, OFF_TS
from .catalog import Catalog, CatalogEntry
from .throttle import TokenBucket

log = logging.getLogger("dbnode.storage")

SEGMENT_SUFFIX = ".seg"


class Cancelled(Exception):
    """A scan was cancelled; output so far is partial."""


class StorageError(Exception):
    pass


@dataclass
class StorageConfig:
    data_dir: str
    segment_bytes: int = 1 << 30
    buffer_pool: int = 3
    utilization_cap: float = 0.5
    w_max_bytes_per_s: float | None = None  # calibrated on demand when throttling
    idle_flush_s: float = 5.0
    io_chunk_bytes: int = 1 << 20
    flush_retries: int = 3
    drive_rate_bytes_per_s: float | None = None  # emulate a drive of this bandwidth

    def __post_init__(self):
        if not 0.0 < self.utilization_cap <= 1.0:
            raise ValueError("utilization_cap must be in (0, 1]")
        if self.segment_bytes < HEADER_SIZE + 1:
            raise ValueError("segment_bytes too small")


class _PendingSegment:
    """Running min/max/type/count stats for the buffer being filled."""

    __slots__ = ("min_ts", "max_ts", "types", "count")

    def __init__(self):
        self.min_ts = None
        self.max_ts = None
        self.types = set()
        self.count = 0


class StorageEngine:
    def __init__(self, config: StorageConfig, catalog: Catalog | None = None,
                 tee=None):
        self.config = config
        self.data_dir = Path(config.data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.catalog = catalog or Catalog(self.data_dir / "catalog.db")
        self.tee = tee  # callable(type_id, ts_ns, payload_bytes) or None
        self.drive = (TokenBucket(config.drive_rate_bytes_per_s)
                      if config.drive_rate_bytes_per_s else None)
        self._write_throttle: TokenBucket | None = None
        self._scan_headroom: TokenBucket | None = None
        if config.utilization_cap < 1.0 and config.w_max_bytes_per_s:
            self._configure_throttles(config.w_max_bytes_per_s)

        self._lock = threading.Lock()
        self._free = threading.Condition(self._lock)
        self._buffers = deque(bytearray(config.segment_bytes)
                              for _ in range(max(1, config.buffer_pool) - 1))
        self._active = bytearray(config.segment_bytes)
        self._fill = 0
        self._pending = _PendingSegment()
        self._flush_q: deque = deque()
        self._flush_cv = threading.Condition()
        self.flush_in_progress = False
        self.unhealthy = False
        self._seq = self._next_file_seq()
        self._last_append = time.monotonic()
        self._stopping = False
        self.stats = {"records": 0, "records_in": 0, "bytes": 0,
                      "segments_sealed": 0, "tee_drops": 0}
        self._flusher = threading.Thread(target=self._flush_loop, daemon=True)
        self._flusher.start()
        self._idler = threading.Thread(target=self._idle_loop, daemon=True)
        self._idler.start()

    def _next_file_seq(self) -> int:
        seq = 0
        for p in self.data_dir.glob(f"*{SEGMENT_SUFFIX}"):
            head = p.name.split("-", 1)[0]
            if head.isdigit():
                seq = max(seq, int(head) + 1)
        return seq

    # -- configuration -------------------------------------------------------

    def _configure_throttles(self, w_max: float) -> None:
        u = self.config.utilization_cap
        self._write_throttle = TokenBucket(u * w_max) if u < 1.0 else None
        self._scan_headroom = TokenBucket((1.0 - u) * w_max) if 0.0 < u < 1.0 else None

    def ensure_calibrated(self) -> float:
        """Make sure W_max is known; calibrate against the data dir if not."""
        if self.config.w_max_bytes_per_s is None:
            self.config.w_max_bytes_per_s = self.calibrate_write_speed()
            self._configure_throttles(self.config.w_max_bytes_per_s)
        return self.config.w_max_bytes_per_s

    def calibrate_write_speed(self, total_bytes: int | None = None, passes: int = 1) -> float:
        """Measure sequential write throughput with segment-sized writes from memory."""
        total = total_bytes or min(self.config.segment_bytes, 256 << 20)
        chunk = bytes(min(self.config.io_chunk_bytes, total))
        path = self.data_dir / ".calibrate.tmp"
        rates = []
        try:
            for _ in range(passes):
                written = 0
                t0 = time.monotonic()
                with open(path, "wb") as f:
                    while written < total:
                        n = min(len(chunk), total - written)
                        if self.drive:
                            self.drive.acquire(n)
                        f.write(chunk[:n])
                        written += n
                    f.flush()
                    os.fsync(f.fileno())
                dt = time.monotonic() - t0
                if dt <= 0:
                    raise StorageError("calibration clock went backwards")
                rates.append(written / dt)
        except OSError as e:
            raise StorageError(f"calibration write failed: {e}") from e
        finally:
            try:
                path.unlink()
            except OSError:
                pass
        return sum(rates) / len(rates)

    # -- append path -----------------------------------------------------------

    def append_stream(self, chunk: bytes) -> int:
        """Append whole framed records from chunk; returns bytes consumed.

        A trailing partial frame is not consumed - the caller re-offers it
        with more data. Blocks when the entire pool is flushing (backpressure).
        """
        view = memoryview(chunk)
        end = len(chunk)
        pos = 0
        appended = 0
        unpack = _TS_TYPE_SRC_LEN.unpack_from
        tee = self.tee
        with self._lock:
            active = self._active
            fill = self._fill
            pend = self._pending
            seg_cap = self.config.segment_bytes
            run_start = pos
            while True:
                if end - pos >= HEADER_SIZE:
                    ts, type_id, _src, plen = unpack(view, pos + OFF_TS)
                    frame_len = HEADER_SIZE + plen
                    whole = end - pos >= frame_len
                else:
                    whole = False
                if whole and fill + frame_len <= seg_cap:
                    if tee is not None:
                        tee(type_id, ts, bytes(view[pos + HEADER_SIZE:pos + frame_len]))
                    if pend.min_ts is None or ts < pend.min_ts:
                        pend.min_ts = ts
                    if pend.max_ts is None or ts > pend.max_ts:
                        pend.max_ts = ts
                    pend.types.add(type_id)
                    pend.count += 1
                    appended += 1
                    pos += frame_len
                    fill += frame_len
                    continue
                # copy the finished run into the active buffer
                if pos > run_start:
                    n = pos - run_start
                    start_fill = fill - n
                    active[start_fill:fill] = view[run_start:pos]
                    run_start = pos
                if not whole:
                    break
                if fill == 0:
                    raise StorageError(
                        f"record of {frame_len} bytes exceeds segment size {seg_cap}")
                # record does not fit: seal and continue into a fresh buffer
                self._fill = fill
                self._seal_locked()
                active = self._active
                fill = self._fill
                pend = self._pending
            self._fill = fill
            self.stats["records_in"] += appended
            self._last_append = time.monotonic()
        return pos

    def force_seal(self) -> None:
        """Seal the ACTIVE buffer if it holds any records (idle/shutdown flush)."""
        with self._lock:
            if self._pending.count > 0:
                self._seal_locked()

    def _seal_locked(self) -> None:
        """Hand ACTIVE to the flusher and make the next free buffer ACTIVE."""
        if self._pending.count == 0:
            return
        item = (self._active, self._fill, self._pending)
        while not self._buffers:
            if self._stopping:
                raise StorageError("storage stopping")
            self._free.wait(0.1)  # PoolExhausted: appenders block here
        self._active = self._buffers.popleft()
        self._fill = 0
        self._pending = _PendingSegment()
        with self._flush_cv:
            self._flush_q.append(item)
            self._flush_cv.notify()

    # -- flusher ------------------------------------------------------------------

    def _flush_loop(self) -> None:
        while True:
            with self._flush_cv:
                while not self._flush_q:
                    if self._stopping:
                        return
                    self._flush_cv.wait(0.1)
                buf, fill, pend = self._flush_q.popleft()
                self.flush_in_progress = True
            try:
                entry = self._write_segment(buf, fill, pend)
                self.stats["segments_sealed"] += 1
                self.stats["records"] += pend.count
                self.stats["bytes"] += fill
                log.debug("sealed %s: %d records, %d bytes", entry.path, pend.count, fill)
            except StorageError:
                log.error("segment flush failed permanently; node unhealthy")
                self.unhealthy = True
            finally:
                self.flush_in_progress = False
                with self._lock:
                    self._buffers.append(buf)
                    self._free.notify_all()

    def _write_segment(self, buf, fill, pend) -> CatalogEntry:
        name = f"{self._seq:08d}-{pend.min_ts}{SEGMENT_SUFFIX}"
        self._seq += 1
        path = self.data_dir / name
        io_chunk = self.config.io_chunk_bytes
        throttle = self._write_throttle
        last_err = None
        for attempt in range(self.config.flush_retries):
            try:
                with open(path, "wb") as f:
                    off = 0
                    mv = memoryview(buf)
                    while off < fill:
                        n = min(io_chunk, fill - off)
                        if throttle:
                            throttle.acquire(n)
                        if self.drive:
                            self.drive.acquire(n)
                        f.write(mv[off:off + n])
                        off += n
                    f.flush()
                    os.fsync(f.fileno())
                return self.catalog.insert({
                    "path": str(path), "min_ts_ns": pend.min_ts, "max_ts_ns": pend.max_ts,
                    "record_count": pend.count, "byte_size": fill,
                    "type_set": pend.types, "sealed": True,
                })
            except OSError as e:
                last_err = e
                log.warning("flush attempt %d failed: %s", attempt + 1, e)
                time.sleep(0.1 * (attempt + 1))
        raise StorageError(f"flush failed after {self.config.flush_retries} attempts: {last_err}")

    def _idle_loop(self) -> None:
        while not self._stopping:
            time.sleep(min(self.config.idle_flush_s / 4, 0.5))
            with self._lock:
                idle = (self._pending.count > 0
                        and time.monotonic() - self._last_append >= self.config.idle_flush_s)
            if idle:
                self.force_seal()

    # -- reads ----------------------------------------------------------------------

    def lookup_segments(self, interval: Interval, type_id: int = 0) -> list[CatalogEntry]:
        return self.catalog.lookup(interval, type_id)

    def scan_segments(self, entries: list[CatalogEntry], interval: Interval,
                      type_id: int = 0, cancel_token: threading.Event | None = None,
                      on_segment=None, pace: bool = True):
        """Yield (ts_ns, type_id, frame_bytes) for matching records, in segment
        then record order. Raises Cancelled promptly when the token is set.

        frame_bytes carries the replayed-from-storage flag already set.
        """
        io_chunk = self.config.io_chunk_bytes
        unpack = _TS_TYPE_SRC_LEN.unpack_from
        lo, hi = interval.from_ts_ns, interval.to_ts_ns
        for i, entry in enumerate(entries):
            if cancel_token is not None and cancel_token.is_set():
                raise Cancelled(f"cancelled before segment {entry.segment_id}")
            try:
                f = open(entry.path, "rb")
            except OSError as e:
                raise StorageError(f"segment {entry.path} unreadable: {e}") from e
            with f:
                carry = b""
                while True:
                    if cancel_token is not None and cancel_token.is_set():
                        raise Cancelled(f"cancelled in segment {entry.segment_id}")
                    data = f.read(io_chunk)
                    if not data:
                        break
                    if pace:
                        if self._scan_headroom:
                            self._scan_headroom.acquire(len(data))
                        if self.drive:
                            self.drive.acquire(len(data))
                        if self.flush_in_progress:
                            time.sleep(0)  # yield to the flusher
                    buf = carry + data if carry else data
                    pos = 0
                    end = len(buf)
                    while end - pos >= HEADER_SIZE:
                        ts, tid, _src, plen = unpack(buf, pos + OFF_TS)
                        frame_len = HEADER_SIZE + plen
                        if end - pos < frame_len:
                            break
                        if lo <= ts <= hi and (type_id == 0 or tid == type_id):
                            frame = bytearray(buf[pos:pos + frame_len])
                            frame[6] |= 0x01  # replayed-from-storage flag
                            yield ts, tid, bytes(frame)
                        pos += frame_len
                    carry = buf[pos:]
                if carry:
                    raise TruncatedRecord(f"segment {entry.path} ends mid-frame")
            if on_segment is not None:
                on_segment(i + 1, len(entries))

    # -- recovery / lifecycle -----------------------------------------------------------

    def recover(self) -> dict:
        """Reconcile files and catalog after an unclean shutdown.

        Data files missing from the catalog are scanned and re-cataloged;
        catalog rows whose file vanished are dropped with a warning.
        """
        known = self.catalog.paths()
        recovered, dropped = 0, 0
        for p in sorted(self.data_dir.glob(f"*{SEGMENT_SUFFIX}")):
            if str(p) in known:
                continue
            fields = self._scan_orphan(p)
            if fields is None:
                continue
            self.catalog.insert(fields)
            recovered += 1
            log.warning("recovered orphan segment %s", p)
        for entry in self.catalog.all_entries():
            if not os.path.exists(entry.path):
                self.catalog.remove(entry.segment_id)
                dropped += 1
                log.warning("dropped catalog entry for missing file %s", entry.path)
        return {"recovered": recovered, "dropped": dropped}

    def _scan_orphan(self, path: Path):
        pend = _PendingSegment()
        valid_end = 0
        try:
            data = path.read_bytes()
        except OSError as e:
            log.warning("cannot read orphan %s: %s", path, e)
            return None
        pos = 0
        end = len(data)
        unpack = _TS_TYPE_SRC_LEN.unpack_from
        while end - pos >= HEADER_SIZE:
            ts, tid, _src, plen = unpack(data, pos + OFF_TS)
            if end - pos < HEADER_SIZE + plen:
                break
            if pend.min_ts is None or ts < pend.min_ts:
                pend.min_ts = ts
            if pend.max_ts is None or ts > pend.max_ts:
                pend.max_ts = ts
            pend.types.add(tid)
            pend.count += 1
            pos += HEADER_SIZE + plen
        valid_end = pos
        if pend.count == 0:
            log.warning("orphan %s holds no whole record, ignoring", path)
            return None
        if valid_end != end:
            log.warning("truncating %s to last whole record (%d -> %d bytes)",
                        path, end, valid_end)
            with open(path, "r+b") as f:
                f.truncate(valid_end)
        return {"path": str(path), "min_ts_ns": pend.min_ts, "max_ts_ns": pend.max_ts,
                "record_count": pend.count, "byte_size": valid_end,
                "type_set": pend.types, "sealed": True}

    def flush_queue_len(self) -> int:
        with self._flush_cv:
            return len(self._flush_q)

    def stop(self, flush: bool = True) -> None:
        if flush:
            self.force_seal()
            deadline = time.monotonic() + 60
            while time.monotonic() < deadline:
                with self._flush_cv:
                    empty = not self._flush_q and not self.flush_in_progress
                if empty:
                    break
                time.sleep(0.02)
        self._stopping = True
        with self._flush_cv:
            self._flush_cv.notify_all()
        with self._lock:
            self._free.notify_all()
        self._flusher.join(timeout=10)
        self._idler.join(timeout=5)
        self.catalog.close()
