"""Flat byte-addressable memory image and the victim memory layout.

The image is a single power-of-two sized byte array with 4096-byte pages.
There is no virtual memory inside the core model; page aliasing for the
covert channel is applied at the cache addressing layer instead.
"""
from __future__ import annotations

from dataclasses import dataclass

PAGE_SIZE = 4096
LINE_SIZE = 64
WORD_BYTES = 8


class MemoryFault(Exception):
    """Architectural access outside the memory image."""

    def __init__(self, kind: str, addr: int):
        self.kind = kind
        self.addr = addr
        super().__init__(f"{kind} fault at address {addr:#x}")

    def identity(self) -> tuple[str, int]:
        return (self.kind, self.addr)


class ModelError(Exception):
    """Simulation guard: a transient access left the memory image entirely.

    Regions inside the image are conventions, so transient out-of-bounds
    reads within the image are silently permitted. Leaving the image is
    always a harness bug and aborts the run.
    """


class LayoutError(Exception):
    pass


class MemoryImage:
    """Byte-addressable memory, size a power of two, zero initialised."""

    def __init__(self, size: int):
        if size <= 0 or size & (size - 1):
            raise LayoutError(f"image size must be a power of two, got {size}")
        if size % PAGE_SIZE:
            raise LayoutError("image size must be a whole number of pages")
        self.size = size
        self.data = bytearray(size)

    def in_bounds(self, addr: int, length: int = 1) -> bool:
        return 0 <= addr and addr + length <= self.size

    def read_byte(self, addr: int) -> int:
        if not self.in_bounds(addr):
            raise MemoryFault("load", addr)
        return self.data[addr]

    def write_byte(self, addr: int, value: int) -> None:
        if not self.in_bounds(addr):
            raise MemoryFault("store", addr)
        self.data[addr] = value & 0xFF

    def read_word(self, addr: int) -> int:
        if not self.in_bounds(addr, WORD_BYTES):
            raise MemoryFault("load", addr)
        return int.from_bytes(self.data[addr:addr + WORD_BYTES], "little")

    def write_word(self, addr: int, value: int) -> None:
        if not self.in_bounds(addr, WORD_BYTES):
            raise MemoryFault("store", addr)
        self.data[addr:addr + WORD_BYTES] = (value & (1 << 64) - 1).to_bytes(8, "little")

    def write_bytes(self, addr: int, blob: bytes) -> None:
        if not self.in_bounds(addr, len(blob)):
            raise MemoryFault("store", addr)
        self.data[addr:addr + len(blob)] = blob

    def fill_words(self, addr: int, word: int, count: int) -> None:
        blob = (word & (1 << 64) - 1).to_bytes(8, "little") * count
        self.write_bytes(addr, blob)

    def snapshot(self) -> bytes:
        return bytes(self.data)

    @property
    def pages(self) -> int:
        return self.size // PAGE_SIZE


@dataclass(frozen=True)
class MemoryLayout:
    """Addresses of every region a victim program uses.

    All gadget programs address memory as region_base + fixed offset, with
    the base arriving in a register at run time, so a layout built with a
    different region_base runs the same program unchanged.

    The secret sits immediately after the data array (secret_base ==
    data_base + data_len) and shares its cache line so a transient
    out-of-bounds read resolves as fast as an in-bounds one.
    """

    region_base: int
    data_base: int
    data_len: int
    data_len_addr: int        # one byte holding data_len
    secret_base: int
    secret_len: int
    tmp_addr: int
    lookup_base: int          # 256 pages, page aligned: the probe array
    magic_base: int           # 256 pages, page aligned, filled with the magic word
    fn_table_addr: int        # indirect-dispatch table (two one-byte code indices)
    ret_table_addr: int       # return-target table (two one-byte code indices)
    stl_dep_addr: int         # flushed byte that delays a store address
    cursor_addr: int          # covert sender position
    pattern_addr: int         # covert sender pattern bytes (up to 256)

    CHANNEL_PAGES = 256

    @property
    def guard_page(self) -> int:
        """Page just below the lookup table; absorbs off-table accesses."""
        return self.lookup_base - PAGE_SIZE

    @property
    def stl_encode_base(self) -> int:
        """Encode base for the store-bypass gadget: byte value v lands on
        lookup page v - 1, so the architectural replay (v == 0) stays off
        the probed table."""
        return self.lookup_base - PAGE_SIZE

    @property
    def span(self) -> int:
        return (self.magic_base + self.CHANNEL_PAGES * PAGE_SIZE) - self.region_base

    def regions(self) -> list[tuple[str, int, int]]:
        """(name, start, size) for every reserved region."""
        return [
            ("data", self.data_base, self.data_len),
            ("secret", self.secret_base, self.secret_len),
            ("data_len", self.data_len_addr, 1),
            ("tmp", self.tmp_addr, 1),
            ("fn_table", self.fn_table_addr, 2),
            ("ret_table", self.ret_table_addr, 2),
            ("stl_dep", self.stl_dep_addr, 1),
            ("cursor", self.cursor_addr, 1),
            ("pattern", self.pattern_addr, 256),
            ("guard", self.guard_page, PAGE_SIZE),
            ("lookup", self.lookup_base, self.CHANNEL_PAGES * PAGE_SIZE),
            ("magic", self.magic_base, self.CHANNEL_PAGES * PAGE_SIZE),
        ]


def validate_layout(img: MemoryImage, layout: MemoryLayout) -> list[str]:
    """Check a layout against an image; returns violations, never raises.

    Checks bounds, page alignment of the channel regions, the data/secret
    adjacency, and that no two regions overlap (adjacency is contiguity,
    not overlap).
    """
    violations = []
    regions = layout.regions()
    for name, start, size in regions:
        if start < 0 or start + size > img.size:
            violations.append(f"bounds: {name} [{start:#x}, {start + size:#x}) outside image")
    for name in ("lookup", "magic"):
        start = dict((n, s) for n, s, _ in regions)[name]
        if start % PAGE_SIZE:
            violations.append(f"alignment: {name} base {start:#x} not page-aligned")
    if layout.secret_base != layout.data_base + layout.data_len:
        violations.append(
            "adjacency: secret_base must sit immediately after data "
            f"({layout.secret_base:#x} != {layout.data_base:#x} + {layout.data_len})")
    ordered = sorted(regions, key=lambda r: r[1])
    for (name_a, start_a, size_a), (name_b, start_b, _) in zip(ordered, ordered[1:]):
        if start_a + size_a > start_b:
            violations.append(f"overlap: {name_a} overlaps {name_b}")
    return violations
