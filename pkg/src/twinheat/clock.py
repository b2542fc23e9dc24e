"""Injectable time sources. Liveness logic never reads the wall clock directly."""

from __future__ import annotations

import time


class SystemClock:
    def now(self) -> float:
        return time.time()


class SimulatedClock:
    """Manually advanced clock for deterministic expiry tests."""

    def __init__(self, start: float = 0.0):
        self._t = float(start)

    def now(self) -> float:
        return self._t

    def advance(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("clock cannot go backwards")
        self._t += seconds
