"""The query controller: HTTP access point, FIFO dispatch, cancellation.

One dispatcher thread feeds at most max_concurrent queries from the FIFO to
an executor; the executor fans LOOKUP + SCAN out to every node in parallel
threads. Node scans replay matched records through the node-side pipelines
to the receptor, so the HTTP API returns lifecycle metadata only.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlparse

from ..config import parse_endpoint
from ..records import Interval, TypeRegistry
from . import queries as Q
from .queries import DrillQuery, QueryStore
from .rpc import NodeClient

log = logging.getLogger("controller")


@dataclass
class ControllerConfig:
    listen_addr: str
    nodes: list[str]
    max_concurrent: int = 1
    journal_path: str | None = None
    cancel_wait_s: float = 30.0
    health_interval_s: float = 1.0
    stream_scan_records: bool = False  # replay already delivers data to the receptor

    @classmethod
    def from_dict(cls, d: dict) -> "ControllerConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


class Controller:
    def __init__(self, config: ControllerConfig, registry: TypeRegistry):
        if not config.nodes:
            raise ValueError("controller needs at least one dbnode")
        self.config = config
        self.registry = registry
        self.store = QueryStore(config.journal_path)
        self.node_addrs = list(config.nodes)
        self.clients = {addr: NodeClient(parse_endpoint(addr)) for addr in self.node_addrs}
        self.health = {addr: {"address": addr, "connected": False, "last_seen": None}
                       for addr in self.node_addrs}
        self._stop = threading.Event()
        self._wake = threading.Event()
        self._threads: list[threading.Thread] = []
        self._httpd: ThreadingHTTPServer | None = None

    # -- lifecycle ---------------------------------------------------------------

    def start(self) -> None:
        for target in (self._dispatch_loop, self._health_loop):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        host, port = parse_endpoint(self.config.listen_addr)
        self._httpd = ThreadingHTTPServer((host, port), _make_handler(self))
        t = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        t.start()
        self._threads.append(t)
        log.info("controller on http://%s:%d, %d nodes", host, port, len(self.node_addrs))

    def stop(self) -> None:
        self._stop.set()
        self._wake.set()
        if self._httpd:
            self._httpd.shutdown()
            self._httpd.server_close()
        for t in self._threads:
            t.join(timeout=5.0)
        self.store.close()

    @property
    def http_port(self) -> int:
        return self._httpd.server_address[1] if self._httpd else 0

    # -- API operations ---------------------------------------------------------------

    def submit_query(self, type_name: str, from_ts_ns: int, to_ts_ns: int) -> DrillQuery:
        if from_ts_ns > to_ts_ns:
            raise ValueError("InvalidInterval")
        type_id = self.registry.id_of(type_name)
        if type_id is None:
            raise KeyError("UnknownType")
        q = self.store.submit(type_name, type_id, from_ts_ns, to_ts_ns)
        self._wake.set()
        return q

    def cancel_query(self, query_id: str) -> DrillQuery:
        q = self.store.get(query_id)
        if q is None:
            raise KeyError("NotFound")
        if q.state in Q.TERMINAL:
            return q  # idempotent
        q.cancel_event.set()
        if q.state == Q.QUEUED:
            try:
                return self.store.transition(query_id, Q.CANCELLED, partial=False)
            except Q.IllegalTransition:
                pass  # raced with the dispatcher; fall through and wait
        deadline = time.monotonic() + self.config.cancel_wait_s
        for addr in self.node_addrs:
            try:
                self.clients[addr].cancel(query_id)
            except OSError:
                pass
        while time.monotonic() < deadline:
            q = self.store.get(query_id)
            if q.state in Q.TERMINAL:
                return q
            time.sleep(0.02)
        return self.store.get(query_id)

    def query_status(self, query_id: str) -> DrillQuery:
        q = self.store.get(query_id)
        if q is None:
            raise KeyError("NotFound")
        return q

    # -- dispatch ----------------------------------------------------------------------

    def _dispatch_loop(self) -> None:
        while not self._stop.is_set():
            self._wake.wait(0.05)
            self._wake.clear()
            while (not self._stop.is_set()
                   and self.store.running_count() < self.config.max_concurrent):
                q = self.store.next_queued()
                if q is None:
                    break
                try:
                    self.store.transition(q.query_id, Q.RUNNING)
                except Q.IllegalTransition:
                    continue  # cancelled while queued
                t = threading.Thread(target=self._execute, args=(q,), daemon=True)
                t.start()

    def _execute(self, q: DrillQuery) -> None:
        interval = Interval(q.from_ts_ns, q.to_ts_ns)
        results: dict[str, dict] = {}
        for addr in self.node_addrs:
            q.progress[addr] = Q.NodeProgress()

        def run_node(addr: str) -> None:
            prog = q.progress[addr]
            client = self.clients[addr]
            try:
                segments = client.lookup(interval, q.type_id)
                prog.segments_total = len(segments)

                def on_progress(doc):
                    if doc.get("event") == "progress":
                        prog.segments_done = doc.get("segments_done", prog.segments_done)
                        prog.records = doc.get("records", prog.records)
                    elif doc.get("event") == "start":
                        prog.segments_total = doc.get("segments", prog.segments_total)

                end = client.scan(q.query_id, interval, q.type_id, on_progress=on_progress,
                                  stream_records=self.config.stream_scan_records)
                prog.records = end.get("records", prog.records)
                prog.segments_done = end.get("segments_done", prog.segments_done)
                prog.finished = True
                results[addr] = end
            except (OSError, ConnectionError) as e:
                results[addr] = {"status": "unreachable", "error": str(e)}

        threads = [threading.Thread(target=run_node, args=(addr,), daemon=True)
                   for addr in self.node_addrs]
        for t in threads:
            t.start()
        cancel_sent = False
        while any(t.is_alive() for t in threads):
            if q.cancel_event.is_set() and not cancel_sent:
                cancel_sent = True
                for addr in self.node_addrs:
                    try:
                        self.clients[addr].cancel(q.query_id)
                    except OSError:
                        pass
            for t in threads:
                t.join(timeout=0.05)
        statuses = [results.get(addr, {}).get("status") for addr in self.node_addrs]
        records = sum(p.records for p in q.progress.values())
        try:
            if any(s in ("unreachable", "failed") for s in statuses):
                for addr in self.node_addrs:  # stop survivors
                    try:
                        self.clients[addr].cancel(q.query_id)
                    except OSError:
                        pass
                bad = [a for a in self.node_addrs
                       if results.get(a, {}).get("status") in ("unreachable", "failed")]
                self.store.transition(q.query_id, Q.FAILED,
                                      error=f"node failure: {', '.join(bad)}")
            elif any(s == "cancelled" for s in statuses) or q.cancel_event.is_set():
                self.store.transition(q.query_id, Q.CANCELLED, partial=records > 0)
            else:
                self.store.transition(q.query_id, Q.DONE)
        except Q.IllegalTransition as e:
            log.warning("query %s: %s", q.query_id, e)
        self._wake.set()

    # -- node health -------------------------------------------------------------

    def _health_loop(self) -> None:
        while not self._stop.is_set():
            for addr in self.node_addrs:
                try:
                    self.clients[addr].ping()
                    self.health[addr] = {"address": addr, "connected": True,
                                         "last_seen": time.time()}
                except OSError:
                    prev = self.health[addr]
                    self.health[addr] = {"address": addr, "connected": False,
                                         "last_seen": prev.get("last_seen")}
            self._stop.wait(self.config.health_interval_s)


def _make_handler(ctl: Controller):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("http %s", fmt % args)

        def _send(self, code: int, doc) -> None:
            body = json.dumps(doc).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.end_headers()
            self.wfile.write(body)

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_GET(self):
            path = urlparse(self.path).path.rstrip("/")
            if path == "/queries":
                self._send(200, [q.to_doc() for q in ctl.store.all()])
            elif path.startswith("/queries/"):
                try:
                    q = ctl.query_status(path.rsplit("/", 1)[1])
                    self._send(200, q.to_doc())
                except KeyError:
                    self._send(404, {"error": "NotFound"})
            elif path == "/nodes":
                self._send(200, list(ctl.health.values()))
            else:
                self._send(404, {"error": "no such endpoint"})

        def do_POST(self):
            path = urlparse(self.path).path.rstrip("/")
            if path != "/queries":
                self._send(404, {"error": "no such endpoint"})
                return
            try:
                n = int(self.headers.get("Content-Length", 0))
                doc = json.loads(self.rfile.read(n).decode() or "{}")
                q = ctl.submit_query(doc.get("type", "*"),
                                     int(doc["from_ts_ns"]), int(doc["to_ts_ns"]))
                self._send(202, {"query_id": q.query_id, "state": q.state})
            except ValueError as e:
                self._send(400, {"error": "InvalidInterval" if "Interval" in str(e)
                                 else f"bad request: {e}"})
            except KeyError as e:
                if "UnknownType" in str(e):
                    self._send(400, {"error": "UnknownType"})
                else:
                    self._send(400, {"error": f"missing field {e}"})

        def do_DELETE(self):
            path = urlparse(self.path).path.rstrip("/")
            if not path.startswith("/queries/"):
                self._send(404, {"error": "no such endpoint"})
                return
            try:
                q = ctl.cancel_query(path.rsplit("/", 1)[1])
                self._send(200, q.to_doc())
            except KeyError:
                self._send(404, {"error": "NotFound"})

    return Handler
