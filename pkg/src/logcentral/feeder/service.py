"""The feeder service: UDP ingest, slot batching, worker fan-out.

One receiver thread owns the UDP sockets and the FILLING slot; header workers
run as forked child processes by default (worker_mode="thread" keeps them
in-process for tests and low-rate deployments). The receiver does no
per-record work: it stamps each datagram once, counts line boundaries, and
copies the datagram into the current slot.
"""

from __future__ import annotations

import logging
import multiprocessing as mp
import selectors
import socket
import threading
import time
from dataclasses import dataclass, field

from ..config import parse_endpoint
from ..records import TypeRegistry, pack_addr, source_id_of
from . import stats as stats_mod
from .ring import CHUNK_HDR, CHUNK_HDR_SIZE, RingQueue
from .stats import StatsSampler, counter_array, worker_base
from .worker import worker_main

log = logging.getLogger("feeder")


@dataclass
class FeederConfig:
    listen_ports: list[int]
    nodes: list[str]
    ring_slots: int = 16
    slot_bytes: int = 4 << 20
    header_workers: int = 2
    stats_csv_path: str | None = None
    worker_mode: str = "process"  # "process" | "thread"
    idle_seal_ms: int = 100
    outbox_bytes: int = 64 << 20
    recv_buf_bytes: int = 8 << 20
    stats_window_ms: int = 100
    listen_host: str = "127.0.0.1"

    @classmethod
    def from_dict(cls, d: dict) -> "FeederConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


class Feeder:
    def __init__(self, config: FeederConfig, registry: TypeRegistry):
        if not config.nodes:
            raise ValueError("feeder needs at least one dbnode endpoint")
        if not 0 <= config.header_workers <= 64:
            raise ValueError("header_workers out of range")
        self.config = config
        self.registry = registry
        self.endpoints = [parse_endpoint(n) for n in config.nodes]
        self._ctx = mp.get_context("fork")
        self.ring = RingQueue(config.ring_slots, config.slot_bytes, ctx=self._ctx)
        self.counters = counter_array(max(config.header_workers, 1), len(self.endpoints), ctx=self._ctx)
        self.stats = StatsSampler(self.counters, max(config.header_workers, 1),
                                  len(self.endpoints), config.stats_window_ms,
                                  config.stats_csv_path)
        self._ready_flags = self._ctx.Array("B", max(config.header_workers, 1), lock=False)
        self._workers: list = []
        self._sockets: list[socket.socket] = []
        self._recv_thread: threading.Thread | None = None
        self._stop_recv = threading.Event()
        self._started = False
        # receiver-local state
        self._fill_idx: int | None = None
        self._fill_off = 0
        self._fill_hint = 0
        self._last_sealed: int | None = None
        self._addr_cache: dict[tuple[str, int], tuple[bytes, int]] = {}

    # -- ingest path ---------------------------------------------------------

    def ingest_datagram(self, data, recv_port: int, src_host: str, src_port: int) -> int:
        """Buffer one datagram; returns the number of line records it holds.

        Splitting into records happens later in a header worker; the receiver
        only stamps, books a sequence-number hint and copies bytes. The exact
        line count returned here is recomputed for the caller; the UDP loop
        uses the byte-based hint and lets workers count lines instead, so the
        single ingest executor spends no per-line time.
        """
        if not data:
            return 0
        if not self._ingest(data, len(data), recv_port, src_host, src_port):
            return 0
        n = bytes(data).count(b"\n")
        if data[-1] != 0x0A:
            n += 1
        return n

    def _ingest(self, data, length: int, recv_port: int, src_host: str, src_port: int) -> bool:
        key = (src_host, src_port)
        cached = self._addr_cache.get(key)
        if cached is None:
            addr16 = pack_addr(src_host)
            cached = (addr16, source_id_of(addr16, src_port))
            if len(self._addr_cache) < 65536:
                self._addr_cache[key] = cached
        addr16, srcid = cached
        need = CHUNK_HDR_SIZE + length
        if need > self.ring.slot_bytes:
            self.counters[stats_mod.DATAGRAMS_DROPPED] += 1
            return False
        if self._fill_idx is not None and self._fill_off + need > self.ring.slot_bytes:
            self._seal_current()
        if self._fill_idx is None and not self._claim_next():
            self.counters[stats_mod.DATAGRAMS_DROPPED] += 1
            return False
        # seq hint: one line needs at least one byte, so length bounds the count
        hint = length
        ts = time.time_ns()
        hdr = CHUNK_HDR.pack(length, hint, ts, src_port, recv_port, addr16, srcid)
        off = self._fill_off
        self.ring.write_at(self._fill_idx, off, hdr)
        self.ring.write_at2(self._fill_idx, off + CHUNK_HDR_SIZE, data, length)
        self._fill_off = off + need
        self._fill_hint += hint
        self.counters[stats_mod.BYTES_IN] += length
        self.counters[stats_mod.DATAGRAMS_IN] += 1
        return True

    def _claim_next(self) -> bool:
        if self._fill_idx is not None:
            return True
        idx = 0 if self._last_sealed is None else (self._last_sealed + 1) % self.ring.slots
        if not self.ring.try_fill(idx):
            return False
        self._fill_idx = idx
        self._fill_off = 0
        self._fill_hint = 0
        return True

    def _seal_current(self) -> None:
        if self._fill_idx is None:
            return
        if self._fill_off == 0:
            self.ring.abandon(self._fill_idx)
        else:
            self.ring.seal(self._fill_idx, self._fill_off, self._fill_hint)
        self._last_sealed = self._fill_idx
        self._fill_idx = None

    def seal_partial(self) -> None:
        """Seal a partially filled slot so its records become dispatchable."""
        if self._fill_idx is not None and self._fill_off > 0:
            self._seal_current()

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        if self._started:
            raise RuntimeError("feeder already started")
        self._started = True
        self._claim_next()
        # fork workers before opening sockets or starting threads
        for w in range(self.config.header_workers):
            args = (w, self.ring, self.registry, self.endpoints, self.counters,
                    worker_base(w, len(self.endpoints)), self.config.outbox_bytes,
                    self._ready_flags)
            if self.config.worker_mode == "thread":
                t = threading.Thread(target=worker_main, args=args, daemon=True)
            else:
                t = self._ctx.Process(target=worker_main, args=args, daemon=True)
            t.start()
            self._workers.append(t)
        self.stats.start()
        for port in self.config.listen_ports:
            s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            s.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, self.config.recv_buf_bytes)
            s.bind((self.config.listen_host, port))
            s.setblocking(False)
            self._sockets.append(s)
        if self._sockets:
            self._recv_thread = threading.Thread(target=self._receive_loop, daemon=True)
            self._recv_thread.start()

    def wait_ready(self, timeout: float = 15.0) -> bool:
        """Wait for every worker to finish its initial node connection pass."""
        deadline = time.monotonic() + timeout
        n = self.config.header_workers
        while time.monotonic() < deadline:
            if all(self._ready_flags[w] for w in range(n)):
                return True
            time.sleep(0.05)
        return n == 0

    def _receive_loop(self) -> None:
        sel = selectors.DefaultSelector()
        port_of = {}
        for s in self._sockets:
            sel.register(s, selectors.EVENT_READ)
            port_of[s.fileno()] = s.getsockname()[1]
        idle_s = self.config.idle_seal_ms / 1000.0
        last_rx = time.monotonic()
        buf = bytearray(65535)
        ingest = self._ingest
        while not self._stop_recv.is_set():
            events = sel.select(timeout=idle_s)
            if not events:
                if self._fill_off > 0 and time.monotonic() - last_rx >= idle_s:
                    self.seal_partial()
                    self._claim_next()
                continue
            for key, _ in events:
                s = key.fileobj
                rport = port_of[s.fileno()]
                for _ in range(256):  # drain bursts without re-selecting
                    try:
                        n, (host, sport) = s.recvfrom_into(buf)
                    except BlockingIOError:
                        break
                    except OSError:
                        return
                    if n:
                        ingest(buf, n, rport, host, sport)
            last_rx = time.monotonic()
        sel.close()

    def stop(self, drain_timeout: float = 30.0) -> None:
        if not self._started:
            return
        self._stop_recv.set()
        if self._recv_thread:
            self._recv_thread.join(timeout=5.0)
        for s in self._sockets:
            try:
                s.close()
            except OSError:
                pass
        self._sockets.clear()
        self.seal_partial()
        if self._fill_idx is not None:
            self.ring.abandon(self._fill_idx)
            self._fill_idx = None
        if not self.ring.wait_drained(drain_timeout):
            from .ring import STATE_NAMES
            log.warning("ring not fully drained at shutdown: %s",
                        [STATE_NAMES[s] for s in self.ring.states()])
        self.ring.signal_stop()
        for t in self._workers:
            t.join(timeout=15.0)
        self._workers.clear()
        self.stats.stop()
        self.ring.close()
        self._started = False

    # -- introspection ---------------------------------------------------------

    def stats_snapshot(self):
        return self.stats.snapshot()

    def totals(self) -> dict:
        return self.stats.totals()
