"""Victim builders: memory layouts, the four leak gadgets, and the covert
channel sender, plus the session object that runs a victim step by step.

Every gadget reads its one input value from r15 and expects r13 to hold
the region base (the session arranges both), so the emitted programs
contain only region-relative offsets and survive layout relocation.
r0 is never written and serves as a zero index register.

The common encoder block is the bounds-free tail of the index gadget:
read a byte, then touch the lookup page selected by that byte (4096-byte
stride), and fold the loaded word into `tmp` so nothing is dead code.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from .config import LabConfig
from .isa import Program, assemble, disassemble
from .memory import (LayoutError, MemoryImage, MemoryLayout, PAGE_SIZE,
                     validate_layout)
from .pipeline import ArchState, ExecutionTrace, MicroArchState, run

VARIANTS = ("pht", "btb", "rsb", "stl")

# region-relative offsets; one variables page, each slot on its own cache
# line and never at page offset 0 (page-aligned lines belong to the probe
# set and must not collide with victim variables)
_LEN_OFF = 64
_TMP_OFF = 128
_FN_TABLE_OFF = 192
_RET_TABLE_OFF = 256
_STL_DEP_OFF = 320
_CURSOR_OFF = 384
_PATTERN_OFF = 448
_DATA_OFF = PAGE_SIZE + 64
_GUARD_OFF = 2 * PAGE_SIZE
_LOOKUP_OFF = 3 * PAGE_SIZE
_MAGIC_OFF = _LOOKUP_OFF + 256 * PAGE_SIZE
_SPAN = _MAGIC_OFF + 256 * PAGE_SIZE


class GadgetError(Exception):
    pass


def standard_layout(image_size: int, aslr_seed: int | None = None, *,
                    data_len: int = 16, secret_len: int = 16) -> MemoryLayout:
    """The canonical victim layout inside an image of the given size.

    Without a seed the region starts at address 0 and every address is a
    fixed documented constant. With a seed the whole region moves to a
    random page-aligned base while all intra-region offsets stay put.
    """
    if image_size < _SPAN:
        raise LayoutError(
            f"image of {image_size} bytes cannot hold the layout "
            f"({_SPAN} bytes: 512 channel pages plus victim data)")
    if secret_len > 48 - data_len:
        raise LayoutError("secret must fit in the data cache line")
    if aslr_seed is None:
        base = 0
    else:
        rng = random.Random(aslr_seed)
        base = rng.randrange(0, (image_size - _SPAN) // PAGE_SIZE + 1) * PAGE_SIZE
    return MemoryLayout(
        region_base=base,
        data_base=base + _DATA_OFF,
        data_len=data_len,
        data_len_addr=base + _LEN_OFF,
        secret_base=base + _DATA_OFF + data_len,
        secret_len=secret_len,
        tmp_addr=base + _TMP_OFF,
        lookup_base=base + _LOOKUP_OFF,
        magic_base=base + _MAGIC_OFF,
        fn_table_addr=base + _FN_TABLE_OFF,
        ret_table_addr=base + _RET_TABLE_OFF,
        stl_dep_addr=base + _STL_DEP_OFF,
        cursor_addr=base + _CURSOR_OFF,
        pattern_addr=base + _PATTERN_OFF,
    )


@dataclass(frozen=True)
class GadgetSpec:
    variant: str
    layout: MemoryLayout
    training_rounds: int = 8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise GadgetError(f"unknown variant {self.variant!r}")
        if self.training_rounds < 1:
            raise GadgetError("training_rounds must be >= 1")


@dataclass(frozen=True)
class LabelByte:
    """Initial-memory byte whose value is a label's instruction index,
    resolved against the final (possibly transformed) program."""
    name: str


@dataclass(frozen=True)
class Gadget:
    """A victim: program, layout, extra initial memory, and the leak
    protocol parameters the receiver needs."""
    variant: str
    program: Program
    layout: MemoryLayout
    data_writes: tuple = ()            # (addr, int | LabelByte) pairs
    flush_addr: int | None = None      # line the receiver evicts pre-exploit
    decode_shift: int = 0              # recovered byte = probe page + shift
    needs_training: bool = True

    def asm(self) -> str:
        return disassemble(self.program)

    def training_input(self, round_index: int) -> int:
        return round_index % self.layout.data_len

    def exploit_input(self, byte_index: int) -> int:
        if self.variant == "stl":
            return byte_index
        return self.layout.data_len + byte_index


def _encoder(layout: MemoryLayout) -> str:
    """tmp &= lookup[loaded_byte << 12], with r8 holding the byte."""
    lookup_off = layout.lookup_base - layout.region_base
    tmp_off = layout.tmp_addr - layout.region_base
    return f"""\
    MOVI r7, {lookup_off}
    ADD r7, r13
    LDB r9, r7, r8, 4096
    MOVI r7, {tmp_off}
    ADD r7, r13
    LDB r10, r7, r0, 1
    AND r10, r9
    ST r7, 0, r10
"""


def _read_data_byte(layout: MemoryLayout) -> str:
    """r8 = data[r15] (one past the end reads the adjacent secret)."""
    data_off = layout.data_base - layout.region_base
    return f"""\
    MOVI r7, {data_off}
    ADD r7, r13
    LDB r8, r7, r15, 1
"""


def build_pht_index_gadget(spec: GadgetSpec) -> Gadget:
    """Bounds-checked table walk: if (x < length) tmp &= lookup[data[x]<<12].

    The length byte is flushed before it is read, so the compare resolves
    slowly and the branch executes under prediction every round.
    """
    if spec.variant != "pht":
        raise GadgetError("spec is not for the pht variant")
    lay = spec.layout
    len_off = lay.data_len_addr - lay.region_base
    source = f"""\
    MOVI r1, {len_off}
    ADD r1, r13
    FLUSH r1, 0
    LDB r2, r1, r0, 1
    BLT r15, r2, lookup
    HALT
lookup:
{_read_data_byte(lay)}{_encoder(lay)}    HALT
"""
    return Gadget(variant="pht", program=assemble(source), layout=lay,
                  flush_addr=lay.data_len_addr)


def build_btb_gadget(spec: GadgetSpec) -> Gadget:
    """Indirect dispatch through a flushed function table.

    In-bounds inputs select the table-walk handler, training the BTB at
    the jump site. The out-of-bounds input architecturally selects the
    skip handler, but the stale prediction transiently runs the walk.
    The selector is branchless (1 + mask) so the PHT plays no part.
    """
    if spec.variant != "btb":
        raise GadgetError("spec is not for the btb variant")
    lay = spec.layout
    len_off = lay.data_len_addr - lay.region_base
    fn_off = lay.fn_table_addr - lay.region_base
    source = f"""\
    MOVI r1, {len_off}
    ADD r1, r13
    LDB r2, r1, r0, 1
    SELMASK r3, r15, r2
    MOVI r4, 1
    ADD r4, r3
    MOVI r5, {fn_off}
    ADD r5, r13
    FLUSH r5, 0
    LDB r6, r5, r4, 1
    JI r6
dispatch_skip:
    HALT
dispatch_walk:
{_read_data_byte(lay)}{_encoder(lay)}    HALT
"""
    writes = ((lay.fn_table_addr, LabelByte("dispatch_walk")),
              (lay.fn_table_addr + 1, LabelByte("dispatch_skip")))
    return Gadget(variant="btb", program=assemble(source), layout=lay,
                  data_writes=writes, flush_addr=lay.fn_table_addr)


def build_rsb_gadget(spec: GadgetSpec) -> Gadget:
    """Call/return victim whose callee overwrites its return address.

    The callee loads its return target from a flushed table: in-bounds
    inputs return normally to the call site, where the table walk sits;
    the out-of-bounds input redirects the return past it. The RSB still
    predicts the call site, so the walk runs transiently.
    """
    if spec.variant != "rsb":
        raise GadgetError("spec is not for the rsb variant")
    lay = spec.layout
    len_off = lay.data_len_addr - lay.region_base
    ret_off = lay.ret_table_addr - lay.region_base
    source = f"""\
    CALL subroutine
resume:
{_read_data_byte(lay)}{_encoder(lay)}    HALT
skip:
    HALT
subroutine:
    MOVI r1, {len_off}
    ADD r1, r13
    LDB r2, r1, r0, 1
    SELMASK r3, r15, r2
    MOVI r4, 1
    ADD r4, r3
    MOVI r5, {ret_off}
    ADD r5, r13
    FLUSH r5, 0
    LDB r14, r5, r4, 1
    RET
"""
    writes = ((lay.ret_table_addr, LabelByte("resume")),
              (lay.ret_table_addr + 1, LabelByte("skip")))
    return Gadget(variant="rsb", program=assemble(source), layout=lay,
                  data_writes=writes, flush_addr=lay.ret_table_addr)


def build_stl_gadget(spec: GadgetSpec) -> Gadget:
    """Store-bypass victim: wipe one secret byte, then read the slot back.

    The wiping store's address depends on a flushed byte, so it sits
    unresolved while the read issues. With bypassing enabled the read
    returns the stale secret and encodes it one page below the lookup
    table (page s-1), so the squash-and-replay pass, which reads the
    fresh zero, lands on the guard page instead of a probed frame.
    No predictor is involved; the gadget needs no training.
    """
    if spec.variant != "stl":
        raise GadgetError("spec is not for the stl variant")
    lay = spec.layout
    data_off = lay.data_base - lay.region_base
    dep_off = lay.stl_dep_addr - lay.region_base
    secret_off = lay.secret_base - lay.region_base
    enc_off = lay.stl_encode_base - lay.region_base
    tmp_off = lay.tmp_addr - lay.region_base
    source = f"""\
    MOVI r4, {data_off}
    ADD r4, r13
    LDB r4, r4, r0, 1
    MOVI r1, {dep_off}
    ADD r1, r13
    FLUSH r1, 0
    LDB r2, r1, r0, 1
    MOVI r3, {secret_off}
    ADD r3, r13
    ADD r3, r15
    ADD r2, r3
    ST r2, 0, r0
    LDB r8, r3, r0, 1
    MOVI r7, {enc_off}
    ADD r7, r13
    LDB r9, r7, r8, 4096
    MOVI r7, {tmp_off}
    ADD r7, r13
    LDB r10, r7, r0, 1
    AND r10, r9
    ST r7, 0, r10
    HALT
"""
    return Gadget(variant="stl", program=assemble(source), layout=lay,
                  flush_addr=lay.stl_dep_addr, decode_shift=1,
                  needs_training=False)


def build_covert_sender(pattern: bytes, layout: MemoryLayout) -> Gadget:
    """Architectural sender: each step touches the lookup page selected
    by the next pattern byte, walking a cursor kept in victim memory."""
    if not 0 < len(pattern) <= 256:
        raise GadgetError("pattern must hold 1..256 bytes")
    lay = layout
    cursor_off = lay.cursor_addr - lay.region_base
    pattern_off = lay.pattern_addr - lay.region_base
    lookup_off = lay.lookup_base - lay.region_base
    source = f"""\
    MOVI r1, {cursor_off}
    ADD r1, r13
    LDB r2, r1, r0, 1
    MOVI r3, {pattern_off}
    ADD r3, r13
    LDB r4, r3, r2, 1
    MOVI r5, {lookup_off}
    ADD r5, r13
    LDB r6, r5, r4, 4096
    MOVI r7, 1
    ADD r7, r2
    ST r1, 0, r7
    HALT
"""
    writes = tuple((lay.pattern_addr + i, b) for i, b in enumerate(pattern))
    return Gadget(variant="covert", program=assemble(source), layout=lay,
                  data_writes=writes, needs_training=False)


def build_gadget(variant: str, spec: GadgetSpec) -> Gadget:
    builders = {"pht": build_pht_index_gadget, "btb": build_btb_gadget,
                "rsb": build_rsb_gadget, "stl": build_stl_gadget}
    if variant not in builders:
        raise GadgetError(f"unknown variant {variant!r}")
    return builders[variant](spec)


@dataclass
class SessionStats:
    runs: int = 0
    squashes: int = 0
    transient_total: int = 0
    squash_causes: list = field(default_factory=list)


class VictimSession:
    """One victim instance: a populated memory image, persistent cache and
    predictor state, and a stepping interface (one input, one run).

    A mitigated program may be passed to replace the gadget's own; label
    references in the gadget's initial-memory table are resolved against
    whichever program actually runs.
    """

    def __init__(self, gadget: Gadget, config: LabConfig,
                 program: Program | None = None):
        self.gadget = gadget
        self.config = config
        self.program = program if program is not None else gadget.program
        self.layout = gadget.layout
        self.memory = MemoryImage(config.image_size)
        self.uarch = MicroArchState.fresh(
            config.cache_config(), pht_size=config.pht_size,
            btb_entries=config.btb_entries, rsb_depth=config.rsb_depth)
        self.pipe_cfg = config.pipeline_config()
        self.stats = SessionStats()
        self._populate()

    def _populate(self) -> None:
        lay = self.layout
        problems = validate_layout(self.memory, lay)
        if problems:
            raise LayoutError("; ".join(problems))
        self.memory.fill_words(lay.magic_base, self.config.magic_value,
                               lay.CHANNEL_PAGES * PAGE_SIZE // 8)
        self.memory.write_byte(lay.data_len_addr, lay.data_len)
        for i in range(lay.data_len):
            self.memory.write_byte(lay.data_base + i, i)
        secret = self.config.secret_bytes()
        self.memory.write_bytes(lay.secret_base, secret[:lay.secret_len])
        self.memory.write_byte(lay.tmp_addr, 0xFF)
        for addr, value in self.gadget.data_writes:
            if isinstance(value, LabelByte):
                index = self.program.labels.get(value.name)
                if index is None:
                    raise GadgetError(f"program lost label {value.name!r}")
                if index > 0xFF:
                    raise GadgetError("label index does not fit in a byte")
                value = index
            self.memory.write_byte(addr, value)

    def step(self, value: int) -> ExecutionTrace | None:
        """Run one victim invocation with the given input value."""
        if not self.config.victim_enabled:
            return None
        arch = ArchState.boot(self.memory, base_reg_value=self.layout.region_base)
        result = run(self.program, arch, self.uarch, self.pipe_cfg, inputs=[value])
        self.stats.runs += 1
        self.stats.squashes += len(result.trace.squashes)
        self.stats.transient_total += result.trace.transient_total()
        self.stats.squash_causes.extend(result.trace.squash_causes())
        return result.trace
