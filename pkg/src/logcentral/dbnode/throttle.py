"""Token-bucket rate limiting for disk bandwidth.

Used three ways: the write throttle (flush rate capped at U x W_max), the
scan headroom limiter ((1-U) x W_max), and the optional shared drive model
that emulates a bandwidth-limited disk for deterministic read/write isolation
testing. Grants are strict FIFO so two greedy competitors split the rate by
request size, the way a saturated drive queue would.

A virtual clock can be injected to make long-horizon accounting tests
instant and exact.
"""

from __future__ import annotations

import threading
import time


class WallClock:
    virtual = False

    def now(self) -> float:
        return time.monotonic()


class VirtualClock:
    """Manually advanced clock for deterministic accounting tests."""

    virtual = True

    def __init__(self):
        self.t = 0.0

    def now(self) -> float:
        return self.t

    def advance(self, dt: float) -> None:
        self.t += dt


class TokenBucket:
    def __init__(self, rate_bytes_per_s: float, capacity: float | None = None,
                 clock=None, start_full: bool = False):
        if rate_bytes_per_s <= 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate_bytes_per_s)
        self.capacity = float(capacity) if capacity else max(self.rate * 0.1, 2 << 20)
        self.clock = clock or WallClock()
        self.tokens = self.capacity if start_full else 0.0
        self._last = self.clock.now()
        self._cv = threading.Condition()
        self._next_ticket = 0
        self._serving = 0
        self.granted_bytes = 0

    def _refill(self) -> None:
        now = self.clock.now()
        dt = now - self._last
        if dt > 0:
            self.tokens = min(self.capacity, self.tokens + dt * self.rate)
            self._last = now

    def acquire(self, nbytes: int) -> None:
        """Block until nbytes are granted. FIFO across callers."""
        if nbytes <= 0:
            return
        need = float(nbytes)
        with self._cv:
            ticket = self._next_ticket
            self._next_ticket += 1
            while True:
                self._refill()
                if self._serving == ticket:
                    # a request larger than burst capacity drains in capacity-sized bites
                    grant = min(need, self.capacity)
                    if self.tokens >= grant:
                        self.tokens -= grant
                        self.granted_bytes += grant
                        need -= grant
                        if need <= 0:
                            self._serving += 1
                            self._cv.notify_all()
                            return
                        continue
                    delay = (grant - self.tokens) / self.rate
                    if self.clock.virtual:
                        self.clock.advance(delay)
                    else:
                        self._cv.wait(delay)
                else:
                    self._cv.wait(0.05)
