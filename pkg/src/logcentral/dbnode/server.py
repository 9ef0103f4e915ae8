"""Storage node service: framed-record TCP ingest plus the control RPC.

Ingest connections (one per feeder worker) stream framed records; the node
acks cumulative consumed bytes so the feeder can trim its re-dispatch outbox.
Backpressure is implicit: when the buffer pool is exhausted the append call
blocks, the read loop stops consuming and the feeder's sends stall.

The control channel serves LOOKUP / SCAN / CANCEL / PING / STATS. Scan
results stream back as record batches interleaved with per-segment progress
events; matched records are simultaneously replayed through this node's
pipelines so summaries land in the receptor under a query-suffixed index.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass

from ..config import parse_endpoint
from ..netproto import ACK, MSG_RECORDS, ProtocolError, recv_json, send_json, send_records
from ..records import HEADER_SIZE, Interval
from ..pipeline.runner import PipelineManager, ReceptorClient
from .catalog import Catalog
from .storage import Cancelled, StorageConfig, StorageEngine, StorageError

log = logging.getLogger("dbnode")


@dataclass
class DbNodeConfig:
    listen_port: int
    control_port: int
    data_dir: str
    name: str = "dbnode"
    listen_host: str = "127.0.0.1"
    segment_bytes: int = 1 << 30
    buffer_pool: int = 3
    utilization_cap: float = 0.5
    w_max_bytes_per_s: float | None = None
    drive_rate_bytes_per_s: float | None = None
    idle_flush_s: float = 5.0
    io_chunk_bytes: int = 1 << 20
    receptor_endpoint: str | None = None
    ack_every_bytes: int = 256 << 10
    recv_chunk_bytes: int = 256 << 10
    scan_batch_bytes: int = 1 << 20
    scan_segment_pause_s: float = 0.0  # test knob: dwell between segments

    @classmethod
    def from_dict(cls, d: dict) -> "DbNodeConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    def storage(self) -> StorageConfig:
        return StorageConfig(
            data_dir=self.data_dir, segment_bytes=self.segment_bytes,
            buffer_pool=self.buffer_pool, utilization_cap=self.utilization_cap,
            w_max_bytes_per_s=self.w_max_bytes_per_s,
            idle_flush_s=self.idle_flush_s, io_chunk_bytes=self.io_chunk_bytes,
            drive_rate_bytes_per_s=self.drive_rate_bytes_per_s)


class CancelRegistry:
    """Shareable level-triggered cancel flags keyed by query id."""

    def __init__(self):
        self._lock = threading.Lock()
        self._tokens: dict[str, threading.Event] = {}

    def token(self, query_id: str) -> threading.Event:
        with self._lock:
            ev = self._tokens.get(query_id)
            if ev is None:
                ev = self._tokens[query_id] = threading.Event()
            return ev

    def cancel(self, query_id: str) -> None:
        self.token(query_id).set()

    def discard(self, query_id: str) -> None:
        with self._lock:
            self._tokens.pop(query_id, None)


class DbNode:
    def __init__(self, config: DbNodeConfig, specs_by_type_id: dict | None = None):
        self.config = config
        self.receptor = ReceptorClient(
            parse_endpoint(config.receptor_endpoint) if config.receptor_endpoint else None)
        self.pipelines = (PipelineManager(specs_by_type_id, self.receptor.send_line)
                          if specs_by_type_id else None)
        tee = self.pipelines.offer if self.pipelines else None
        self.engine = StorageEngine(config.storage(), tee=tee)
        self.engine.recover()
        self.cancels = CancelRegistry()
        self._stop = threading.Event()
        self._listeners: list[socket.socket] = []
        self._threads: list[threading.Thread] = []
        self._conn_threads: list[threading.Thread] = []

    # -- lifecycle ------------------------------------------------------------

    def start(self) -> None:
        ingest = self._listen(self.config.listen_port)
        control = self._listen(self.config.control_port)
        self._listeners = [ingest, control]
        for sock, handler in ((ingest, self._handle_ingest), (control, self._handle_control)):
            t = threading.Thread(target=self._accept_loop, args=(sock, handler), daemon=True)
            t.start()
            self._threads.append(t)
        log.info("%s: ingest :%d control :%d data %s", self.config.name,
                 self.config.listen_port, self.config.control_port, self.config.data_dir)

    def _listen(self, port: int) -> socket.socket:
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        s.bind((self.config.listen_host, port))
        s.listen(16)
        s.settimeout(0.25)
        return s

    def _accept_loop(self, listener: socket.socket, handler) -> None:
        while not self._stop.is_set():
            try:
                conn, peer = listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            t = threading.Thread(target=handler, args=(conn, peer), daemon=True)
            t.start()
            self._conn_threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        for s in self._listeners:
            try:
                s.close()
            except OSError:
                pass
        for t in self._threads:
            t.join(timeout=2.0)
        for t in list(self._conn_threads):
            t.join(timeout=5.0)
        self.engine.stop(flush=True)
        if self.pipelines:
            self.pipelines.stop()
        self.receptor.close()

    # -- ingest ------------------------------------------------------------------

    def _handle_ingest(self, conn: socket.socket, peer) -> None:
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn.settimeout(0.1)
        stash = b""
        consumed_total = 0
        acked_total = 0
        last_ack_time = time.monotonic()
        try:
            while not self._stop.is_set():
                data = None
                try:
                    data = conn.recv(self.config.recv_chunk_bytes)
                    if not data:
                        break
                except socket.timeout:
                    pass
                if data:
                    stash = stash + data if stash else data
                    n = self.engine.append_stream(stash)
                    if n:
                        stash = stash[n:]
                        consumed_total += n
                now = time.monotonic()
                if (consumed_total - acked_total >= self.config.ack_every_bytes
                        or (consumed_total > acked_total and now - last_ack_time > 0.1)):
                    conn.sendall(ACK.pack(consumed_total))
                    acked_total = consumed_total
                    last_ack_time = now
            if consumed_total > acked_total:
                conn.sendall(ACK.pack(consumed_total))
        except (OSError, StorageError) as e:
            log.warning("%s: ingest connection %s closed: %s", self.config.name, peer, e)
        finally:
            try:
                conn.close()
            except OSError:
                pass

    # -- control channel ------------------------------------------------------------

    def _handle_control(self, conn: socket.socket, peer) -> None:
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            while not self._stop.is_set():
                try:
                    req = recv_json(conn)
                except (ConnectionError, ProtocolError, ValueError):
                    break
                op = req.get("op")
                if op == "lookup":
                    self._op_lookup(conn, req)
                elif op == "scan":
                    self._op_scan(conn, req)
                elif op == "cancel":
                    self.cancels.cancel(req["query_id"])
                    send_json(conn, {"ok": True})
                elif op == "ping":
                    send_json(conn, {"ok": True, "name": self.config.name,
                                     "unhealthy": self.engine.unhealthy})
                elif op == "stats":
                    stats = dict(self.engine.stats)
                    stats["tee_drops"] = self.pipelines.tee_drops if self.pipelines else 0
                    stats["tee_depth"] = self.pipelines.queue_depth() if self.pipelines else 0
                    stats["receptor_dropped"] = self.receptor.dropped
                    send_json(conn, {"ok": True, "stats": stats})
                else:
                    send_json(conn, {"ok": False, "error": f"unknown op {op!r}"})
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _entry_doc(self, e) -> dict:
        return {"segment_id": e.segment_id, "path": e.path, "min_ts_ns": e.min_ts_ns,
                "max_ts_ns": e.max_ts_ns, "record_count": e.record_count,
                "byte_size": e.byte_size, "type_ids": sorted(e.type_set)}

    def _op_lookup(self, conn, req) -> None:
        interval = Interval(int(req["from_ts_ns"]), int(req["to_ts_ns"]))
        entries = self.engine.lookup_segments(interval, int(req.get("type_id", 0)))
        send_json(conn, {"ok": True, "segments": [self._entry_doc(e) for e in entries]})

    def _op_scan(self, conn, req) -> None:
        query_id = req["query_id"]
        interval = Interval(int(req["from_ts_ns"]), int(req["to_ts_ns"]))
        type_id = int(req.get("type_id", 0))
        stream_records = bool(req.get("stream_records", True))
        token = self.cancels.token(query_id)
        entries = self.engine.lookup_segments(interval, type_id)
        send_json(conn, {"ok": True, "event": "start", "segments": len(entries)})
        replay = self.pipelines.replay_session(query_id) if self.pipelines else None
        batch = bytearray()
        records = 0
        segments_done = 0
        status = "done"
        pause = self.config.scan_segment_pause_s

        def flush_batch():
            if batch:
                send_records(conn, bytes(batch))
                del batch[:]

        def on_segment(done, total):
            nonlocal segments_done
            segments_done = done
            flush_batch()
            send_json(conn, {"event": "progress", "segments_done": done,
                             "segments_total": total, "records": records})
            if pause:
                time.sleep(pause)

        try:
            for ts, tid, frame in self.engine.scan_segments(
                    entries, interval, type_id, cancel_token=token, on_segment=on_segment):
                if stream_records:
                    batch += frame
                    if len(batch) >= self.config.scan_batch_bytes:
                        flush_batch()
                records += 1
                if replay is not None:
                    replay.process(tid, ts, frame[HEADER_SIZE:])
        except Cancelled:
            status = "cancelled"
        except (StorageError, OSError) as e:
            log.warning("%s: scan %s failed: %s", self.config.name, query_id, e)
            status = "failed"
        try:
            flush_batch()
        except OSError:
            status = "failed"
        if replay is not None:
            replay.flush()
        self.cancels.discard(query_id)
        send_json(conn, {"event": "end", "status": status, "records": records,
                         "segments_done": segments_done, "segments_total": len(entries)})
