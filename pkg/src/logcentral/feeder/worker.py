"""Header workers: claim filled slots, frame records, fan out round-robin.

A worker claims READY slots first-come first-serve, reserves a contiguous
range of sequence numbers for the slot, and builds per-node byte batches in
one pass. Record seq_no doubles as the round-robin dispatch index, so node
assignment is (seq_no mod live_count) and per-node counts over any run differ
by at most one regardless of how many workers raced.

The hot loop builds each frame as prefix + packed(len, seq) + suffix where
prefix (magic..source_id) and suffix (addr..reserved) are constant per chunk;
with a port-only type registry the per-record Python work is two list appends
and one struct pack.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from collections import deque

from ..netproto import ACK
from ..records import HEADER_SIZE, RecordHeader, LogRecord, TypeRegistry
from .ring import CHUNK_HDR, CHUNK_HDR_SIZE, RingQueue

log = logging.getLogger("feeder.worker")

_PREFIX = struct.Struct("<4sHHQII")  # magic, version, flags, ts, type_id, source_id
_LENSEQ = struct.Struct("<IQ")       # payload_len, seq_no
_PORT = struct.Struct("<H")
_RESERVED = bytes(10)


class NodeDown(ConnectionError):
    pass


def iter_chunks(slot_bytes: bytes):
    """Yield (ts_ns, src_port, recv_port, addr16, source_id, data) per chunk."""
    off = 0
    end = len(slot_bytes)
    while off + CHUNK_HDR_SIZE <= end:
        clen, hint, ts, sport, rport, addr, srcid = CHUNK_HDR.unpack_from(slot_bytes, off)
        data = slot_bytes[off + CHUNK_HDR_SIZE:off + CHUNK_HDR_SIZE + clen]
        yield ts, sport, rport, addr, srcid, data
        off += CHUNK_HDR_SIZE + clen


def split_lines(data: bytes) -> list[bytes]:
    """Datagram bytes to payload lines: split on newline, strip CR, drop empties."""
    lines = data.split(b"\n")
    if lines and not lines[-1]:
        lines.pop()
    if b"\r" in data:
        lines = [ln.rstrip(b"\r") for ln in lines]
    if any(not ln for ln in lines):
        lines = [ln for ln in lines if ln]
    return lines


def frame_records(slot_bytes: bytes, registry: TypeRegistry, seq_base: int):
    """Reference framing path: yield LogRecord per line of a sealed slot.

    The worker's fused loop produces byte-identical frames; tests hold the
    two paths against each other.
    """
    seq = seq_base
    for ts, sport, rport, addr, srcid, data in iter_chunks(slot_bytes):
        for ln in split_lines(data):
            header = RecordHeader(
                ingest_ts_ns=ts,
                type_id=registry.classify(rport, ln),
                source_id=srcid,
                payload_len=len(ln),
                seq_no=seq,
                source_addr=addr,
                source_port=sport,
            )
            yield LogRecord(header, ln)
            seq += 1


def frame_and_split(slot_bytes: bytes, registry: TypeRegistry, seq_base: int,
                    n_nodes: int) -> tuple[list[list[bytes]], list[int], int]:
    """Fused framing + per-node split for one slot.

    Returns (per-node frame piece lists, per-node record counts, total records).
    Piece lists are ready for b"".join; record i of the slot lands on node
    (seq_base + i) mod n_nodes.
    """
    parts: list[list[bytes]] = [[] for _ in range(n_nodes)]
    counts = [0] * n_nodes
    pack = _LENSEQ.pack
    port_only = registry.port_only
    seq = seq_base
    for ts, sport, rport, addr, srcid, data in iter_chunks(slot_bytes):
        lines = split_lines(data)
        if not lines:
            continue
        suffix = addr + _PORT.pack(sport) + _RESERVED
        if port_only:
            prefix = _PREFIX.pack(b"LGS1", 1, 0, ts, registry.classify_port(rport), srcid)
            for k in range(n_nodes):
                shift = (k - seq) % n_nodes
                sub = lines[shift::n_nodes]
                if not sub:
                    continue
                s = seq + shift
                ap = parts[k].append
                for ln in sub:
                    ap(prefix + pack(len(ln), s) + suffix)
                    ap(ln)
                    s += n_nodes
                counts[k] += len(sub)
            seq += len(lines)
        else:
            classify = registry.classify
            for ln in lines:
                k = seq % n_nodes
                parts[k].append(
                    _PREFIX.pack(b"LGS1", 1, 0, ts, classify(rport, ln), srcid)
                    + pack(len(ln), seq) + suffix)
                parts[k].append(ln)
                counts[k] += 1
                seq += 1
    return parts, counts, seq - seq_base


class NodeLink:
    """One worker's TCP connection to one dbnode, with an acked outbox.

    The peer acks cumulative received bytes; batches stay queued until covered
    by an ack so they can be re-dispatched to survivors if the node dies.
    """

    def __init__(self, endpoint: tuple[str, int], outbox_limit: int = 64 << 20):
        self.endpoint = endpoint
        self.outbox_limit = outbox_limit
        self.sock: socket.socket | None = None
        self.alive = False
        self.gen = 0  # bumped on connect/death so stale sends can't corrupt accounting
        self.lock = threading.Lock()
        self.ack_cv = threading.Condition(self.lock)
        self.sent_bytes = 0
        self.acked_bytes = 0
        self.outbox: deque = deque()  # (cum_end_bytes, payload, record_count)
        self._ack_thread: threading.Thread | None = None

    def connect(self, timeout: float = 2.0) -> bool:
        try:
            s = socket.create_connection(self.endpoint, timeout=timeout)
        except OSError:
            return False
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        s.settimeout(None)
        with self.lock:
            self.sock = s
            self.alive = True
            self.gen += 1
            self.sent_bytes = 0
            self.acked_bytes = 0
            self.outbox.clear()
        self._ack_thread = threading.Thread(target=self._ack_loop, args=(s,), daemon=True)
        self._ack_thread.start()
        return True

    def _ack_loop(self, s: socket.socket) -> None:
        buf = b""
        try:
            while True:
                d = s.recv(4096)
                if not d:
                    break
                buf += d
                if len(buf) >= 8:
                    (cum,) = ACK.unpack_from(buf, (len(buf) // 8 - 1) * 8)
                    buf = buf[(len(buf) // 8) * 8:]
                    with self.lock:
                        self.acked_bytes = max(self.acked_bytes, cum)
                        while self.outbox and self.outbox[0][0] <= self.acked_bytes:
                            self.outbox.popleft()
                        self.ack_cv.notify_all()
        except OSError:
            pass
        with self.lock:
            if self.sock is s:
                self.alive = False
            self.ack_cv.notify_all()

    def send(self, payload: bytes, record_count: int) -> None:
        """Send one batch; blocks while the unacked outbox exceeds its limit."""
        with self.lock:
            while self.alive and self.sent_bytes - self.acked_bytes > self.outbox_limit:
                self.ack_cv.wait(0.2)
            if not self.alive or self.sock is None:
                raise NodeDown(f"node {self.endpoint} down")
            sock = self.sock
            gen = self.gen
        try:
            sock.sendall(payload)
        except OSError as e:
            self.mark_dead()
            raise NodeDown(f"send to {self.endpoint} failed: {e}") from e
        with self.lock:
            if not self.alive or self.gen != gen:
                raise NodeDown(f"node {self.endpoint} died during send")
            self.sent_bytes += len(payload)
            self.outbox.append((self.sent_bytes, payload, record_count))

    def pending(self) -> list[tuple[bytes, int]]:
        with self.lock:
            out = [(p, c) for _, p, c in self.outbox]
            self.outbox.clear()
            return out

    def mark_dead(self) -> None:
        with self.lock:
            self.alive = False
            self.gen += 1
            s, self.sock = self.sock, None
            self.ack_cv.notify_all()
        if s is not None:
            try:
                s.close()
            except OSError:
                pass

    def wait_acked(self, timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        with self.lock:
            while self.alive and self.acked_bytes < self.sent_bytes:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self.ack_cv.wait(min(remaining, 0.2))
            return self.acked_bytes >= self.sent_bytes or not self.outbox

    def close(self) -> None:
        self.mark_dead()


class HeaderWorker:
    """Claims slots, frames records and dispatches them round-robin.

    Runs as the main loop of a child process (default) or a thread.
    """

    def __init__(self, worker_id: int, ring: RingQueue, registry: TypeRegistry,
                 node_endpoints: list[tuple[str, int]], counters, counter_base: int,
                 outbox_limit: int = 64 << 20, ready_flags=None):
        self.worker_id = worker_id
        self.ring = ring
        self.registry = registry
        self.links = [NodeLink(ep, outbox_limit) for ep in node_endpoints]
        self.counters = counters
        # counters[base] = records_in, [base+1] = records_out, [base+2+k] = sent to node k
        self.base = counter_base
        self.ready_flags = ready_flags
        self._stop = False

    def connect_all(self, retry_window: float = 10.0) -> None:
        deadline = time.monotonic() + retry_window
        while time.monotonic() < deadline and not self.ring.stop_flag.value:
            if all(l.alive or l.connect(1.0) for l in self.links):
                break
            time.sleep(0.2)
        if self.ready_flags is not None:
            self.ready_flags[self.worker_id] = 1

    def run(self) -> None:
        self.connect_all()
        reconnector = threading.Thread(target=self._reconnect_loop, daemon=True)
        reconnector.start()
        ring = self.ring
        try:
            while True:
                got = ring.claim_ready(0.2)
                if got is None:
                    if ring.stop_flag.value:
                        break
                    continue
                idx, fill_len, hint, seq_base = got
                data = ring.slot_view(idx, fill_len)
                self._process_slot(data, seq_base)
                ring.release(idx)
        finally:
            self._stop = True
            for l in self.links:
                l.wait_acked(10.0)
            for l in self.links:
                l.close()

    def _process_slot(self, slot_bytes: bytes, seq_base: int) -> None:
        n = len(self.links)
        parts, counts, total = frame_and_split(slot_bytes, self.registry, seq_base, n)
        self.counters[self.base] += total  # records_in: lines actually split out
        for k in range(n):
            if not parts[k]:
                continue
            payload = b"".join(parts[k])
            self._send_with_failover(k, payload, counts[k])
        self.counters[self.base + 1] += total

    def _send_with_failover(self, k: int, payload: bytes, count: int) -> None:
        link = self.links[k]
        if link.alive:
            try:
                link.send(payload, count)
                self.counters[self.base + 2 + k] += count
                return
            except NodeDown:
                self._on_node_down(k)
        self._redispatch([(payload, count)], exclude=k)

    def _on_node_down(self, k: int) -> None:
        link = self.links[k]
        log.warning("worker %d: node %s down, re-dispatching outbox", self.worker_id, link.endpoint)
        link.mark_dead()
        pending = link.pending()
        if pending:
            self._redispatch(pending, exclude=k)

    def _redispatch(self, batches: list[tuple[bytes, int]], exclude: int) -> None:
        """Send failed batches to surviving nodes, rotating across them."""
        survivors = [i for i, l in enumerate(self.links) if l.alive and i != exclude]
        rot = 0
        for payload, count in batches:
            sent = False
            for _ in range(len(survivors) * 2 + 1):
                if not survivors:
                    break
                i = survivors[rot % len(survivors)]
                rot += 1
                try:
                    self.links[i].send(payload, count)
                    self.counters[self.base + 2 + i] += count
                    sent = True
                    break
                except NodeDown:
                    survivors.remove(i)
            if not sent:
                log.error("worker %d: all nodes down, dropping batch of %d records",
                          self.worker_id, count)

    def _reconnect_loop(self) -> None:
        while not self._stop and not self.ring.stop_flag.value:
            for l in self.links:
                if not l.alive:
                    l.connect(1.0)
            time.sleep(1.0)


def worker_main(worker_id, ring, registry, endpoints, counters, counter_base,
                outbox_limit, ready_flags):
    """Entry point for worker processes/threads."""
    try:
        HeaderWorker(worker_id, ring, registry, endpoints, counters, counter_base,
                     outbox_limit, ready_flags).run()
    except KeyboardInterrupt:
        pass
