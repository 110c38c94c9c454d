import threading

from accmon.clock import Clock


class ManualClock(Clock):
    """Test clock: time moves only when the test says so."""

    def __init__(self, start: float):
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def sleep(self, seconds: float) -> None:
        # real waiting is pointless under a manual clock; yield briefly so
        # looping threads do not spin at full speed
        import time

        time.sleep(0.005)

    def sleep_until(self, t: float) -> None:
        self.sleep(0)

    def set(self, t: float) -> None:
        with self._lock:
            self._now = float(t)

    def advance(self, seconds: float) -> None:
        with self._lock:
            self._now += seconds
