"""Pipeline execution: per-type executors fed by a bounded tee queue.

Storage always wins: the dbnode append path offers records to the tee and
drops them (counted) when the queue is full. Each log type gets one executor
thread running its PipelineInstance; outputs are newline-delimited JSON
pushed to the receptor over a shared TCP client.

Drill-down replays run the same specs synchronously on the scan thread with
the output index suffixed by the query id, so replayed summaries never mix
into live indexes.
"""

from __future__ import annotations

import json
import logging
import shlex
import socket
import subprocess
import threading
import time
from collections import deque

from ..timefmt import iso_ns
from .spec import (ExternalStage, FilterStage, ParseStage, PipelineSpec,
                   SerializeStage, WindowStage)
from .stages import Parser, SummaryRecord, TumblingWindows, apply_filter, serialize_record

log = logging.getLogger("pipeline")

CRASH_LOOP_WINDOW_S = 60.0
CRASH_LOOP_LIMIT = 3


class ExternalRunner:
    """A line-in/line-out child process stage with restart and crash-loop guard."""

    def __init__(self, command: str, on_line, name: str = "external"):
        self.command = command
        self.argv = shlex.split(command)
        self.on_line = on_line
        self.name = name
        self.proc: subprocess.Popen | None = None
        self.disabled = False
        self.crashes: deque = deque()
        self._lock = threading.Lock()
        self._reader: threading.Thread | None = None
        self._spawn()

    def _spawn(self) -> None:
        if self.disabled:
            return
        try:
            self.proc = subprocess.Popen(
                self.argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL, bufsize=0)
        except OSError as e:
            log.error("%s: cannot spawn %r: %s", self.name, self.command, e)
            self.disabled = True
            return
        self._reader = threading.Thread(target=self._read_loop, args=(self.proc,), daemon=True)
        self._reader.start()

    def _read_loop(self, proc: subprocess.Popen) -> None:
        try:
            for raw in proc.stdout:
                self.on_line(raw.rstrip(b"\r\n"))
        except (OSError, ValueError):
            pass

    def _note_crash(self) -> None:
        now = time.monotonic()
        self.crashes.append(now)
        while self.crashes and now - self.crashes[0] > CRASH_LOOP_WINDOW_S:
            self.crashes.popleft()
        if len(self.crashes) >= CRASH_LOOP_LIMIT:
            self.disabled = True
            log.error("ALARM %s: child %r crashed %d times in %.0fs, stage disabled",
                      self.name, self.command, len(self.crashes), CRASH_LOOP_WINDOW_S)

    def write(self, payload: bytes) -> None:
        """Write one payload line to the child, restarting it if it died."""
        with self._lock:
            if self.disabled:
                return
            proc = self.proc
            if proc is None or proc.poll() is not None:
                if proc is not None:
                    self._note_crash()
                    if self.disabled:
                        return
                    time.sleep(min(0.1 * len(self.crashes), 0.5))
                self._spawn()
                proc = self.proc
                if proc is None:
                    return
            try:
                proc.stdin.write(payload + b"\n")
                proc.stdin.flush()
            except (OSError, ValueError):
                self._note_crash()
                self.proc = None

    def flush_and_close(self, timeout: float = 5.0) -> None:
        with self._lock:
            proc, self.proc = self.proc, None
            self.disabled = True
        if proc is None:
            return
        try:
            proc.stdin.close()
            proc.wait(timeout=timeout)
        except (OSError, subprocess.TimeoutExpired):
            proc.kill()
        if self._reader:
            self._reader.join(timeout=timeout)


class PipelineInstance:
    """Executes one spec for one log type; confined to a single executor."""

    def __init__(self, spec: PipelineSpec, emit, index_suffix: str = ""):
        self.spec = spec
        self.index_name = spec.index_name + index_suffix
        self.emit = emit  # callable(json_line_str)
        self._parser: Parser | None = None
        self._filters: list[FilterStage] = []
        self._windows: TumblingWindows | None = None
        self._terminal = spec.stages[-1]
        self._external: ExternalRunner | None = None
        for stage in spec.stages:
            if isinstance(stage, ParseStage):
                self._parser = Parser(stage)
            elif isinstance(stage, FilterStage):
                self._filters.append(stage)
            elif isinstance(stage, WindowStage):
                self._windows = TumblingWindows(stage, self.index_name)
        if isinstance(self._terminal, ExternalStage):
            self._external = ExternalRunner(
                self._terminal.command, self._emit_external_line,
                name=f"pipeline[{spec.type_name}]")

    def _emit_external_line(self, raw: bytes) -> None:
        """Wrap a child's output line as a summary document if needed."""
        text = raw.decode("utf-8", "replace")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError:
            doc = None
        if isinstance(doc, dict):
            if "@index" not in doc:
                doc["@index"] = self.index_name
            if "@ts" not in doc:
                doc["@ts"] = iso_ns(time.time_ns())
            self.emit(json.dumps(doc, separators=(",", ":"), ensure_ascii=False))
        else:
            self.emit(serialize_record({"line": text}, self.index_name, time.time_ns()))

    def process(self, ts_ns: int, payload: bytes) -> None:
        fields = None
        if self._parser is not None:
            fields = self._parser.parse(payload.decode("latin-1"))
            for f in self._filters:
                if not apply_filter(f.predicate, fields):
                    return
        if self._windows is not None:
            for summary in self._windows.update(fields or {}, ts_ns):
                self.emit(summary.to_json_line())
            return
        if self._external is not None:
            self._external.write(payload)
            return
        if fields is None:
            fields = {"payload": payload.decode("latin-1")}
        self.emit(serialize_record(fields, self.index_name, ts_ns))

    def flush(self) -> None:
        if self._windows is not None:
            for summary in self._windows.flush():
                self.emit(summary.to_json_line())
        if self._external is not None:
            self._external.flush_and_close()

    @property
    def late_records(self) -> int:
        return self._windows.late_records if self._windows else 0


class ReceptorClient:
    """Buffered newline-JSON sender with reconnect; never blocks producers."""

    def __init__(self, endpoint: tuple[str, int] | None, max_pending: int = 65536):
        self.endpoint = endpoint
        self.pending: deque = deque()
        self.max_pending = max_pending
        self.dropped = 0
        self.sent = 0
        self._cv = threading.Condition()
        self._stop = False
        self._thread = None
        if endpoint is not None:
            self._thread = threading.Thread(target=self._run, daemon=True)
            self._thread.start()

    def send_line(self, line: str) -> None:
        if self.endpoint is None:
            return
        with self._cv:
            if len(self.pending) >= self.max_pending:
                self.pending.popleft()
                self.dropped += 1
            self.pending.append(line.encode() + b"\n")
            self._cv.notify()

    def _run(self) -> None:
        sock = None
        while True:
            with self._cv:
                while not self.pending and not self._stop:
                    self._cv.wait(0.2)
                if self._stop and not self.pending:
                    break
                batch = []
                size = 0
                while self.pending and size < 1 << 20:
                    b = self.pending.popleft()
                    batch.append(b)
                    size += len(b)
            payload = b"".join(batch)
            while True:
                if sock is None:
                    try:
                        sock = socket.create_connection(self.endpoint, timeout=2.0)
                        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                    except OSError:
                        sock = None
                        if self._stop:
                            return
                        time.sleep(0.5)
                        continue
                try:
                    sock.sendall(payload)
                    self.sent += len(batch)
                    break
                except OSError:
                    try:
                        sock.close()
                    except OSError:
                        pass
                    sock = None
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass

    def close(self, timeout: float = 5.0) -> None:
        with self._cv:
            self._stop = True
            self._cv.notify_all()
        if self._thread:
            self._thread.join(timeout=timeout)


class PipelineManager:
    """Live per-type pipelines behind the storage tee, plus replay sessions."""

    def __init__(self, specs_by_type_id: dict[int, PipelineSpec], emit,
                 tee_queue_size: int = 65536):
        self.specs = dict(specs_by_type_id)
        self.emit = emit
        self.tee_drops = 0
        self._queues: dict[int, deque] = {}
        self._cvs: dict[int, threading.Condition] = {}
        self._instances: dict[int, PipelineInstance] = {}
        self._threads: list[threading.Thread] = []
        self._stop = False
        self.tee_queue_size = tee_queue_size
        for type_id, spec in self.specs.items():
            self._queues[type_id] = deque()
            self._cvs[type_id] = threading.Condition()
            self._instances[type_id] = PipelineInstance(spec, emit)
            t = threading.Thread(target=self._executor, args=(type_id,), daemon=True,
                                 name=f"pipeline-{spec.type_name}")
            t.start()
            self._threads.append(t)

    def offer(self, type_id: int, ts_ns: int, payload: bytes) -> None:
        """Tee entry point from the append path; lossy by design under lag."""
        cv = self._cvs.get(type_id)
        if cv is None:
            return
        q = self._queues[type_id]
        with cv:
            if len(q) >= self.tee_queue_size:
                self.tee_drops += 1
                return
            q.append((ts_ns, payload))
            cv.notify()

    def _executor(self, type_id: int) -> None:
        q = self._queues[type_id]
        cv = self._cvs[type_id]
        inst = self._instances[type_id]
        while True:
            with cv:
                while not q and not self._stop:
                    cv.wait(0.2)
                if self._stop and not q:
                    break
                items = []
                while q and len(items) < 4096:
                    items.append(q.popleft())
            for ts_ns, payload in items:
                try:
                    inst.process(ts_ns, payload)
                except Exception:
                    log.exception("pipeline %s: record processing failed", inst.spec.type_name)
        inst.flush()

    def replay_session(self, query_id: str) -> "ReplaySession":
        return ReplaySession(self.specs, self.emit, query_id)

    def queue_depth(self) -> int:
        return sum(len(q) for q in self._queues.values())

    def stop(self) -> None:
        self._stop = True
        for cv in self._cvs.values():
            with cv:
                cv.notify_all()
        for t in self._threads:
            t.join(timeout=10.0)


class ReplaySession:
    """Per-query pipeline instances whose indexes carry a query-id suffix."""

    def __init__(self, specs_by_type_id: dict[int, PipelineSpec], emit, query_id: str):
        suffix = "@" + query_id[:8]
        self._instances = {
            tid: PipelineInstance(spec, emit, index_suffix=suffix)
            for tid, spec in specs_by_type_id.items()
        }

    def process(self, type_id: int, ts_ns: int, payload: bytes) -> None:
        inst = self._instances.get(type_id)
        if inst is not None:
            inst.process(ts_ns, payload)

    def flush(self) -> None:
        for inst in self._instances.values():
            inst.flush()
