"""Gateway health supervision.

A gateway is Healthy while its last telemetry is fresher than
stale_factor * refresh (default 2x), Stale between that and
down_factor * refresh (default 6x), Down beyond it or if never seen.
State transitions are monotone in silence duration and reversible only
by a fresh point; each degradation fires the transition callback
exactly once (the service turns those into SystemFault alerts).
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import Callable, Optional


class GatewayState(enum.Enum):
    HEALTHY = "healthy"
    STALE = "stale"
    DOWN = "down"


_SEVERITY = {GatewayState.HEALTHY: 0, GatewayState.STALE: 1, GatewayState.DOWN: 2}


@dataclass(frozen=True)
class GatewayStatus:
    house_id: str
    state: GatewayState
    last_seen: Optional[int]  # None = never seen
    missed_ticks: int
    seq_gaps: int  # cumulative publishes lost according to seq numbers

    def to_dict(self) -> dict:
        return {
            "house": self.house_id,
            "state": self.state.value,
            "last_seen": self.last_seen,
            "missed_ticks": self.missed_ticks,
            "seq_gaps": self.seq_gaps,
        }


class Supervision:
    def __init__(
        self,
        houses: list[str],
        refresh_period_s: int = 30,
        stale_factor: float = 2.0,
        down_factor: float = 6.0,
        started_at: int = 0,
        on_transition: Optional[Callable[[str, GatewayState, GatewayState], None]] = None,
    ):
        if not 0 < stale_factor < down_factor:
            raise ValueError("need 0 < stale_factor < down_factor")
        self.refresh = refresh_period_s
        self.stale_after = stale_factor * refresh_period_s
        self.down_after = down_factor * refresh_period_s
        self.started_at = started_at
        self.on_transition = on_transition
        self._lock = threading.Lock()
        self._last_seen: dict[str, Optional[int]] = {h: None for h in houses}
        self._last_seq: dict[str, Optional[int]] = {h: None for h in houses}
        self._seq_gaps: dict[str, int] = {h: 0 for h in houses}
        self._state: dict[str, GatewayState] = {h: GatewayState.DOWN for h in houses}

    def houses(self) -> list[str]:
        with self._lock:
            return sorted(self._last_seen)

    def record_seen(self, house_id: str, ts: int, seq: Optional[int] = None) -> None:
        """Note a telemetry point; called from the ingest path."""
        transition = None
        with self._lock:
            if house_id not in self._last_seen:  # unknown house: track it anyway
                self._last_seq[house_id] = None
                self._seq_gaps[house_id] = 0
                self._state[house_id] = GatewayState.DOWN
            prev_seen = self._last_seen.get(house_id)
            if prev_seen is None or ts >= prev_seen:
                self._last_seen[house_id] = ts
            if seq is not None:
                last = self._last_seq.get(house_id)
                if last is not None and seq > last + 1:
                    self._seq_gaps[house_id] += seq - last - 1
                self._last_seq[house_id] = max(seq, last or 0)
            old = self._state[house_id]
            if old is not GatewayState.HEALTHY:
                self._state[house_id] = GatewayState.HEALTHY
                transition = (house_id, old, GatewayState.HEALTHY)
        if transition and self.on_transition:
            self.on_transition(*transition)

    def _classify(self, house_id: str, now: float) -> tuple[GatewayState, int]:
        last = self._last_seen[house_id]
        ref = last if last is not None else self.started_at
        silence = max(0.0, now - ref)
        missed = int(silence // self.refresh)
        if last is None:
            return GatewayState.DOWN, missed
        if silence < self.stale_after:
            return GatewayState.HEALTHY, missed
        if silence < self.down_after:
            return GatewayState.STALE, missed
        return GatewayState.DOWN, missed

    def tick(self, now: float) -> list[GatewayStatus]:
        """Re-evaluate all houses at time now; fires degradations once."""
        transitions = []
        out = []
        with self._lock:
            for house in sorted(self._last_seen):
                new, missed = self._classify(house, now)
                old = self._state[house]
                # silence can only degrade; recovery happens in record_seen
                if _SEVERITY[new] > _SEVERITY[old]:
                    self._state[house] = new
                    transitions.append((house, old, new))
                out.append(
                    GatewayStatus(
                        house_id=house,
                        state=self._state[house],
                        last_seen=self._last_seen[house],
                        missed_ticks=missed,
                        seq_gaps=self._seq_gaps[house],
                    )
                )
        if self.on_transition:
            for t in transitions:
                self.on_transition(*t)
        return out

    def state_of(self, house_id: str) -> GatewayState:
        with self._lock:
            return self._state.get(house_id, GatewayState.DOWN)

    def status_of(self, house_id: str, now: float) -> GatewayStatus:
        with self._lock:
            if house_id not in self._last_seen:
                raise KeyError(house_id)
            _, missed = self._classify(house_id, now)
            return GatewayStatus(
                house_id=house_id,
                state=self._state[house_id],
                last_seen=self._last_seen[house_id],
                missed_ticks=missed,
                seq_gaps=self._seq_gaps[house_id],
            )

    def is_fresh(self, house_id: str, now: float) -> bool:
        """True while the last point is younger than the stale threshold."""
        with self._lock:
            last = self._last_seen.get(house_id)
        return last is not None and (now - last) < self.stale_after
