"""Arithmetic-operation counting for complexity measurements.

Kernels report their scalar-op counts here whenever a counter is
installed.  Counts land in named buckets so a caller can separate, say,
the attention core of a block from the surrounding data movement.
"""

from __future__ import annotations

from collections import defaultdict
from contextlib import contextmanager

_active: "OpCounter | None" = None


class OpCounter:
    """Accumulates scalar arithmetic-op counts into named buckets."""

    def __init__(self):
        self.buckets = defaultdict(int)
        self._bucket = "other"

    def add(self, n: int):
        self.buckets[self._bucket] += int(n)

    @property
    def total(self) -> int:
        return sum(self.buckets.values())


@contextmanager
def count_ops():
    """Install a fresh counter for the duration of the block."""
    global _active
    prev, _active = _active, OpCounter()
    try:
        yield _active
    finally:
        _active = prev


@contextmanager
def bucket(name: str):
    """Redirect counts to `name` while the block runs. No-op without a counter."""
    if _active is None:
        yield
        return
    prev, _active._bucket = _active._bucket, name
    try:
        yield
    finally:
        _active._bucket = prev


def add_ops(n: int):
    if _active is not None:
        _active.add(n)
