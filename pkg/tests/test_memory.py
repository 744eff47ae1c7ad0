import dataclasses

import pytest

from spectrelab.gadgets import standard_layout
from spectrelab.memory import (LayoutError, MemoryFault, MemoryImage,
                               PAGE_SIZE, validate_layout)


def test_image_size_must_be_power_of_two():
    MemoryImage(1 << 16)
    with pytest.raises(LayoutError):
        MemoryImage(3 * PAGE_SIZE)
    with pytest.raises(LayoutError):
        MemoryImage(0)


def test_byte_and_word_access():
    img = MemoryImage(1 << 14)
    img.write_byte(5, 0x1FF)          # masked to a byte
    assert img.read_byte(5) == 0xFF
    img.write_word(8, 0x0102030405060708)
    assert img.read_word(8) == 0x0102030405060708
    assert img.read_byte(8) == 0x08   # little endian


def test_out_of_bounds_faults():
    img = MemoryImage(1 << 14)
    with pytest.raises(MemoryFault) as exc:
        img.read_byte(1 << 14)
    assert exc.value.identity() == ("load", 1 << 14)
    with pytest.raises(MemoryFault):
        img.write_byte(-1, 0)
    with pytest.raises(MemoryFault):
        img.read_word((1 << 14) - 4)


def test_standard_layout_validates_clean():
    img = MemoryImage(4 * 1024 * 1024)
    layout = standard_layout(img.size)
    assert validate_layout(img, layout) == []


def test_misaligned_lookup_flagged():
    img = MemoryImage(4 * 1024 * 1024)
    layout = standard_layout(img.size)
    crooked = dataclasses.replace(layout, lookup_base=layout.lookup_base + 8)
    problems = validate_layout(img, crooked)
    assert any(p.startswith("alignment") for p in problems)


def test_overlapping_regions_flagged():
    img = MemoryImage(4 * 1024 * 1024)
    layout = standard_layout(img.size)
    clash = dataclasses.replace(layout, secret_base=layout.lookup_base,
                                data_base=layout.lookup_base - layout.data_len)
    problems = validate_layout(img, clash)
    assert any(p.startswith("overlap") for p in problems)


def test_broken_adjacency_flagged():
    img = MemoryImage(4 * 1024 * 1024)
    layout = standard_layout(img.size)
    gap = dataclasses.replace(layout, secret_base=layout.secret_base + 64)
    problems = validate_layout(img, gap)
    assert any(p.startswith("adjacency") for p in problems)


def test_out_of_image_region_flagged():
    img = MemoryImage(4 * 1024 * 1024)
    layout = standard_layout(img.size)
    outside = dataclasses.replace(layout, tmp_addr=img.size + 10)
    problems = validate_layout(img, outside)
    assert any(p.startswith("bounds") for p in problems)


def test_image_too_small_for_layout():
    with pytest.raises(LayoutError, match="512 channel pages"):
        standard_layout(64 * 1024)
