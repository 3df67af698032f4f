"""Exact forward/backward pass accounting.

Every objective evaluation counts as one forward; every gradient
computation counts as one backward.  Selection traces are built from
snapshot deltas of these counters, so increments must be exact -- there
is no sampling or approximation anywhere in this module.
"""
from __future__ import annotations

import threading


class EvalCounter:
    """Monotone forward/backward counters, safe for concurrent updates."""

    __slots__ = ("_lock", "forwards", "backwards")

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.forwards = 0
        self.backwards = 0

    def add_forward(self, n: int = 1) -> None:
        with self._lock:
            self.forwards += n

    def add_backward(self, n: int = 1) -> None:
        with self._lock:
            self.backwards += n

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return (self.forwards, self.backwards)

    def delta_since(self, snap: tuple[int, int]) -> tuple[int, int]:
        f, b = self.snapshot()
        return (f - snap[0], b - snap[1])

    def __repr__(self) -> str:
        return f"EvalCounter(forwards={self.forwards}, backwards={self.backwards})"
