"""Set-associative LRU data cache with fixed, deterministic latencies.

This is the covert-channel medium: a line is either cached or not, and
`classify` turns an access latency back into that bit. Addresses pass
through an optional page alias table first, so victim pages remapped by
the receiver land on the receiver's own lines (the shared-memory analog).
"""
from __future__ import annotations

import random
from dataclasses import dataclass

from .memory import PAGE_SIZE


class CacheConfigError(Exception):
    pass


@dataclass(frozen=True)
class CacheConfig:
    line_size: int = 64
    sets: int = 64
    ways: int = 8
    hit_latency: int = 40
    miss_latency: int = 300
    jitter: int = 0               # uniform +/- cycles added to latencies
    jitter_seed: int | None = None

    def __post_init__(self):
        for name in ("line_size", "sets"):
            v = getattr(self, name)
            if v <= 0 or v & (v - 1):
                raise CacheConfigError(f"{name} must be a power of two, got {v}")
        if self.ways <= 0:
            raise CacheConfigError("ways must be positive")
        if self.miss_latency <= self.hit_latency:
            raise CacheConfigError("miss latency must exceed hit latency")
        if self.jitter < 0:
            raise CacheConfigError("jitter must be >= 0")


class PageAliasTable:
    """Page-granular address translation consulted before cache indexing."""

    def __init__(self):
        self._map: dict[int, int] = {}

    def alias(self, from_page: int, to_page: int) -> None:
        self._map[from_page] = to_page

    def translate(self, addr: int) -> int:
        page, offset = divmod(addr, PAGE_SIZE)
        target = self._map.get(page)
        if target is None:
            return addr
        return target * PAGE_SIZE + offset

    def __len__(self) -> int:
        return len(self._map)

    def items(self):
        return self._map.items()


class Cache:
    """LRU cache; per-set insertion-ordered dicts give O(1) promote/evict."""

    def __init__(self, config: CacheConfig | None = None):
        self.config = config or CacheConfig()
        self._sets: list[dict[int, None]] = [dict() for _ in range(self.config.sets)]
        self.aliases = PageAliasTable()
        self._rng = (random.Random(self.config.jitter_seed)
                     if self.config.jitter else None)

    def _locate(self, addr: int) -> tuple[dict[int, None], int]:
        line = self.aliases.translate(addr) // self.config.line_size
        return self._sets[line & (self.config.sets - 1)], line

    def _latency(self, base: int) -> int:
        if self._rng is None:
            return base
        return max(1, base + self._rng.randint(-self.config.jitter, self.config.jitter))

    def access(self, addr: int) -> tuple[bool, int]:
        """Touch the line holding addr; returns (hit, latency in cycles).

        On a hit the line is promoted to most-recently-used; on a miss it
        is inserted, evicting the LRU line if the set is full.
        """
        bucket, line = self._locate(addr)
        if line in bucket:
            del bucket[line]
            bucket[line] = None
            return True, self._latency(self.config.hit_latency)
        if len(bucket) >= self.config.ways:
            del bucket[next(iter(bucket))]
        bucket[line] = None
        return False, self._latency(self.config.miss_latency)

    def flush(self, addr: int) -> None:
        """Evict the line holding addr if present; idempotent."""
        bucket, line = self._locate(addr)
        bucket.pop(line, None)

    def contains(self, addr: int) -> bool:
        """Non-mutating inclusion check (test/diagnostic helper; a real
        attacker only sees this through access latency)."""
        bucket, line = self._locate(addr)
        return line in bucket

    def resident_lines(self) -> int:
        return sum(len(bucket) for bucket in self._sets)


def classify(latency: int, threshold: int, config: CacheConfig) -> bool:
    """True iff the latency says the line was cached (latency < threshold).

    The threshold must lie strictly between the configured hit and miss
    latencies, otherwise the channel cannot distinguish the two.
    """
    if not config.hit_latency < threshold < config.miss_latency:
        raise CacheConfigError(
            f"threshold {threshold} not strictly between hit latency "
            f"{config.hit_latency} and miss latency {config.miss_latency}")
    return latency < threshold
