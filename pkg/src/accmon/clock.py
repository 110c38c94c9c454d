"""Injectable clocks.

Every component takes time as a parameter or reads it from one of these
clocks, never from ``time.time()`` directly, so a whole day of operation
can be replayed in seconds and tests stay deterministic.
"""

from __future__ import annotations

import threading
import time


class Clock:
    """Wall clock. ``now()`` returns Unix seconds (float)."""

    def now(self) -> float:
        return time.time()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def sleep_until(self, t: float) -> None:
        self.sleep(t - self.now())


class SimClock(Clock):
    """Accelerated clock mapping wall time onto a simulated timeline.

    now() = start + (wall - wall_at_start) * acceleration

    acceleration <= 0 means "free running": now() only moves when
    advance()/advance_to() is called, and sleep_until() returns
    immediately after advancing the clock itself. That mode is used by
    single-threaded drivers that want to run as fast as the CPU allows.
    """

    def __init__(self, start: float, acceleration: float = 1.0):
        self.start = float(start)
        self.acceleration = float(acceleration)
        self._wall0 = time.time()
        self._free_now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        if self.acceleration <= 0:
            with self._lock:
                return self._free_now
        return self.start + (time.time() - self._wall0) * self.acceleration

    def sleep(self, seconds: float) -> None:
        if seconds <= 0:
            return
        if self.acceleration <= 0:
            with self._lock:
                self._free_now += seconds
            return
        time.sleep(seconds / self.acceleration)

    def sleep_until(self, t: float) -> None:
        if self.acceleration <= 0:
            with self._lock:
                if t > self._free_now:
                    self._free_now = t
            return
        self.sleep(t - self.now())

    def advance_to(self, t: float) -> None:
        with self._lock:
            if t > self._free_now:
                self._free_now = t
