"""Per-window throughput counters for the feeder.

Counters live in one shared unsigned-64 array with single-writer cells: the
receiver owns the first block, each worker owns a block of 2 + n_nodes cells
(records_in at split time, records_out at dispatch, per-node sent counts). A
sampler thread snapshots the array on a fixed cadence (100 ms by default) and
turns deltas into completed measurement windows.
"""

from __future__ import annotations

import csv
import multiprocessing as mp
import threading
import time
from dataclasses import dataclass

BYTES_IN, DATAGRAMS_IN, DATAGRAMS_DROPPED = 0, 1, 2
RECEIVER_CELLS = 3
W_RECORDS_IN, W_RECORDS_OUT, W_SENT0 = 0, 1, 2


def counter_array(n_workers: int, n_nodes: int, ctx=None):
    ctx = ctx or mp.get_context("fork")
    return ctx.Array("Q", RECEIVER_CELLS + n_workers * (2 + n_nodes), lock=False)


def worker_base(worker_id: int, n_nodes: int) -> int:
    return RECEIVER_CELLS + worker_id * (2 + n_nodes)


@dataclass
class StatsWindow:
    window_start_ns: int
    records_in: int
    records_out: int
    bytes_in: int
    datagrams_dropped: int
    per_node_sent: tuple[int, ...]


class StatsSampler:
    def __init__(self, counters, n_workers: int, n_nodes: int,
                 window_ms: int = 100, csv_path=None):
        self.counters = counters
        self.n_workers = n_workers
        self.n_nodes = n_nodes
        self.window_s = window_ms / 1000.0
        self.csv_path = csv_path
        self.windows: list[StatsWindow] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread = None
        self._csv_file = None
        self._csv = None

    def _snapshot(self):
        c = list(self.counters)
        records_in = 0
        records_out = 0
        per_node = [0] * self.n_nodes
        for w in range(self.n_workers):
            base = worker_base(w, self.n_nodes)
            records_in += c[base + W_RECORDS_IN]
            records_out += c[base + W_RECORDS_OUT]
            for k in range(self.n_nodes):
                per_node[k] += c[base + W_SENT0 + k]
        return records_in, records_out, c[BYTES_IN], c[DATAGRAMS_DROPPED], per_node

    def totals(self) -> dict:
        ri, ro, bi, dd, per_node = self._snapshot()
        return {"records_in": ri, "records_out": ro, "bytes_in": bi,
                "datagrams_dropped": dd, "per_node_sent": per_node}

    def start(self):
        if self.csv_path:
            self._csv_file = open(self.csv_path, "w", newline="")
            self._csv = csv.writer(self._csv_file)
            self._csv.writerow(
                ["window_start_ns", "records_in", "records_out", "bytes_in", "datagrams_dropped"]
                + [f"sent_node_{k}" for k in range(self.n_nodes)])
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self):
        prev = self._snapshot()
        next_tick = time.monotonic() + self.window_s
        window_start = time.time_ns()
        while not self._stop.is_set():
            delay = next_tick - time.monotonic()
            if delay > 0:
                self._stop.wait(delay)
            next_tick += self.window_s
            cur = self._snapshot()
            win = StatsWindow(
                window_start_ns=window_start,
                records_in=cur[0] - prev[0],
                records_out=cur[1] - prev[1],
                bytes_in=cur[2] - prev[2],
                datagrams_dropped=cur[3] - prev[3],
                per_node_sent=tuple(a - b for a, b in zip(cur[4], prev[4])),
            )
            window_start = time.time_ns()
            prev = cur
            with self._lock:
                self.windows.append(win)
                if self._csv:
                    self._csv.writerow(
                        [win.window_start_ns, win.records_in, win.records_out,
                         win.bytes_in, win.datagrams_dropped, *win.per_node_sent])
                    if len(self.windows) % 10 == 0:
                        self._csv_file.flush()

    def snapshot(self) -> list[StatsWindow]:
        with self._lock:
            return list(self.windows)

    def stop(self):
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=2.0)
        with self._lock:
            if self._csv_file:
                self._csv_file.flush()
                self._csv_file.close()
                self._csv = self._csv_file = None
