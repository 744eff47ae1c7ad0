"""Prediction structures: pattern history table, branch target buffer,
return stack buffer, and the store bypass policy flag.

All of this state lives in MicroArchState and survives pipeline squashes.
"""
from __future__ import annotations

from dataclasses import dataclass


class Pht:
    """Per-site 2-bit saturating counters, indexed by low bits of the
    branch instruction index. Counters start at 1 (weakly not-taken)."""

    def __init__(self, size: int = 1024, init: int = 1):
        if size <= 0 or size & (size - 1):
            raise ValueError(f"table size must be a power of two, got {size}")
        if not 0 <= init <= 3:
            raise ValueError("counter init must be in [0, 3]")
        self.size = size
        self.table = [init] * size

    def _index(self, site: int) -> int:
        return site & (self.size - 1)

    def predict(self, site: int) -> bool:
        return self.table[self._index(site)] >= 2

    def update(self, site: int, taken: bool) -> None:
        i = self._index(site)
        if taken:
            self.table[i] = min(self.table[i] + 1, 3)
        else:
            self.table[i] = max(self.table[i] - 1, 0)


class Btb:
    """Direct-mapped branch target buffer with full-tag match."""

    def __init__(self, entries: int = 256):
        if entries <= 0 or entries & (entries - 1):
            raise ValueError(f"entry count must be a power of two, got {entries}")
        self.entries = entries
        self.tags = [None] * entries
        self.targets = [0] * entries

    def predict(self, site: int) -> int | None:
        i = site & (self.entries - 1)
        if self.tags[i] == site:
            return self.targets[i]
        return None

    def update(self, site: int, target: int) -> None:
        i = site & (self.entries - 1)
        self.tags[i] = site
        self.targets[i] = target


class Rsb:
    """Circular return stack: LIFO, pushes beyond depth overwrite the
    oldest entry, pops on empty predict nothing (the pipeline stalls)."""

    def __init__(self, depth: int = 16):
        if depth < 0:
            raise ValueError("depth must be >= 0")
        self.depth = depth
        self.buffer = [0] * depth
        self.top = depth - 1
        self.occupancy = 0

    def push(self, return_index: int) -> None:
        if self.depth == 0:
            return
        self.top = (self.top + 1) % self.depth
        self.buffer[self.top] = return_index
        self.occupancy = min(self.occupancy + 1, self.depth)

    def pop(self) -> int | None:
        if self.occupancy == 0:
            return None
        value = self.buffer[self.top]
        self.top = (self.top - 1) % self.depth
        self.occupancy -= 1
        return value

    def peek(self) -> int | None:
        """Inspect the top entry without consuming it."""
        if self.occupancy == 0:
            return None
        return self.buffer[self.top]


@dataclass
class StoreBypassPolicy:
    """Whether loads may speculatively bypass older unresolved stores."""
    enabled: bool = True
