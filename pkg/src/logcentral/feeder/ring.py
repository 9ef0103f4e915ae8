"""Circular queue of buffer slots shared between the receiver and header workers.

Slot data lives in one anonymous shared mmap created before workers fork, so
the same code runs whether workers are threads or child processes. Slot states
and cursors live in multiprocessing primitives guarded by a single condition;
the receiver and workers only touch it once per slot, never per record.

A slot's byte region holds datagram chunks written by the receiver:

    [u32 chunk_len][u32 line_hint][u64 ts_ns][u16 src_port][u16 recv_port]
    [16B src_addr][u32 source_id] + chunk_len datagram bytes

line_hint is the receiver's newline count (an upper bound on the lines a
worker will emit); workers reserve that many sequence numbers per chunk and
leave gaps unused, so seq_no stays unique and monotone in claim order.
"""

from __future__ import annotations

import mmap
import multiprocessing as mp
import struct
import time

FREE, FILLING, READY, DRAINING = 0, 1, 2, 3
STATE_NAMES = {FREE: "FREE", FILLING: "FILLING", READY: "READY", DRAINING: "DRAINING"}

CHUNK_HDR = struct.Struct("<IIQHH16sI")
CHUNK_HDR_SIZE = CHUNK_HDR.size  # 40


class RingFull(Exception):
    """No FREE slot is available; the datagram is dropped whole."""


class RingQueue:
    def __init__(self, slots: int, slot_bytes: int, ctx=None):
        if slots < 2:
            raise ValueError("ring needs at least 2 slots")
        ctx = ctx or mp.get_context("fork")
        self.slots = slots
        self.slot_bytes = slot_bytes
        self.data = mmap.mmap(-1, slots * slot_bytes)
        zero = bytes(1 << 20)
        total = slots * slot_bytes
        for off in range(0, total, len(zero)):  # pre-fault pages once, off the hot path
            self.data[off:off + min(len(zero), total - off)] = zero[:min(len(zero), total - off)]
        self.state = ctx.Array("B", slots, lock=False)
        self.fill_len = ctx.Array("q", slots, lock=False)
        self.line_hint = ctx.Array("q", slots, lock=False)
        self.cond = ctx.Condition()
        self.drain_cursor = ctx.Value("q", 0, lock=False)
        self.seq_counter = ctx.Value("Q", 0, lock=False)
        self.stop_flag = ctx.Value("b", 0, lock=False)

    # -- receiver side (single owner of FILLING) --------------------------

    def try_fill(self, idx: int) -> bool:
        with self.cond:
            if self.state[idx] != FREE:
                return False
            self.state[idx] = FILLING
        return True

    def seal(self, idx: int, fill_len: int, line_hint: int) -> None:
        with self.cond:
            self.fill_len[idx] = fill_len
            self.line_hint[idx] = line_hint
            self.state[idx] = READY
            self.cond.notify_all()

    def abandon(self, idx: int) -> None:
        """Return an empty FILLING slot to FREE (shutdown with no data)."""
        with self.cond:
            self.state[idx] = FREE

    # -- worker side -------------------------------------------------------

    def claim_ready(self, timeout: float = 0.2):
        """Claim the oldest READY slot (FCFS via the drain cursor).

        Returns (slot_idx, fill_len, line_hint, seq_base) or None on timeout
        or stop. Sequence numbers for the slot are reserved here, under the
        same lock as the claim, so seq order matches claim order.
        """
        deadline = time.monotonic() + timeout
        with self.cond:
            while True:
                idx = self.drain_cursor.value
                if self.state[idx] == READY:
                    self.state[idx] = DRAINING
                    self.drain_cursor.value = (idx + 1) % self.slots
                    seq_base = self.seq_counter.value
                    self.seq_counter.value = seq_base + self.line_hint[idx]
                    return idx, self.fill_len[idx], self.line_hint[idx], seq_base
                if self.stop_flag.value:
                    return None
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self.cond.wait(remaining)

    def release(self, idx: int) -> None:
        with self.cond:
            self.fill_len[idx] = 0
            self.line_hint[idx] = 0
            self.state[idx] = FREE
            self.cond.notify_all()

    # -- shared ------------------------------------------------------------

    def signal_stop(self) -> None:
        with self.cond:
            self.stop_flag.value = 1
            self.cond.notify_all()

    def states(self) -> list[int]:
        with self.cond:
            return list(self.state)

    def drained(self) -> bool:
        with self.cond:
            return all(s == FREE for s in self.state)

    def wait_drained(self, timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        with self.cond:
            while not all(s == FREE for s in self.state):
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self.cond.wait(min(remaining, 0.1))
            return True

    def slot_view(self, idx: int, length: int) -> bytes:
        off = idx * self.slot_bytes
        return self.data[off:off + length]

    def write_at(self, idx: int, offset: int, payload: bytes) -> None:
        off = idx * self.slot_bytes + offset
        self.data[off:off + len(payload)] = payload

    def write_at2(self, idx: int, offset: int, payload, length: int) -> None:
        """write_at for buffer-protocol payloads longer than needed (recv_into)."""
        off = idx * self.slot_bytes + offset
        if length != len(payload):
            payload = memoryview(payload)[:length]
        self.data[off:off + length] = payload

    def close(self) -> None:
        try:
            self.data.close()
        except (BufferError, ValueError):
            pass
