"""Simulated clock. All protocol timestamps come from here, never wall time."""

from __future__ import annotations


class Clock:
    """Millisecond clock advanced explicitly by the simulation loop."""

    def __init__(self, start_ms: int = 1_700_000_000_000, tick_ms: int = 1_000):
        self._now_ms = start_ms
        self.tick_ms = tick_ms
        self._ticks = 0

    @property
    def now_ms(self) -> int:
        return self._now_ms

    @property
    def ticks(self) -> int:
        return self._ticks

    def tick(self) -> int:
        """Advance one tick; returns the new tick index."""
        self._now_ms += self.tick_ms
        self._ticks += 1
        return self._ticks

    def advance_ms(self, ms: int) -> None:
        self._now_ms += ms
