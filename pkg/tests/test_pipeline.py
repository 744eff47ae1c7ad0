import random

import pytest

from progden import fresh_arch, random_program
from spectrelab.cache import CacheConfig
from spectrelab.isa import assemble
from spectrelab.memory import MemoryFault, MemoryImage
from spectrelab.pipeline import (ArchState, MicroArchState, PipelineConfig,
                                 ProgramFault, load_available_at, place_inputs,
                                 reference_run, run)


def machine(mem_bytes=None, **cfg_kwargs):
    mem = MemoryImage(1 << 16)
    if mem_bytes:
        for addr, value in mem_bytes.items():
            mem.write_byte(addr, value)
    arch = ArchState.boot(mem)
    arch.regs[12] = 0x4000
    return arch, MicroArchState.fresh(), PipelineConfig(**cfg_kwargs)


# one flushed-operand branch with a long fall-through to count transients
MISPREDICT_SRC = (
    "MOVI r2, 9\n"
    "LDB r1, r12, r0, 1\n"          # mem[0x4000] = 50
    "BLT r2, r1, done\n"            # taken; fresh PHT says not-taken
    + "MOVI r3, 1\n" * 50
    + "done:\n    HALT\n"
)


def test_reference_movimm():
    arch = ArchState.boot(MemoryImage(1 << 14))
    reference_run(assemble("MOVI r0, 5\nHALT"), arch)
    assert arch.regs[0] == 5
    assert arch.halted


def test_straight_line_matches_reference_no_squash():
    prog = assemble("MOVI r1, 7\nADD r1, 3\nSHL r1, 2\nST r12, 0, r1\nHALT")
    arch, uarch, cfg = machine()
    result = run(prog, arch, uarch, cfg)
    ref = ArchState.boot(MemoryImage(1 << 16))
    ref.regs[12] = 0x4000
    reference_run(prog, ref)
    assert arch.equal_outputs(ref)
    assert result.trace.squashes == []
    assert arch.mem.read_byte(0x4000) == 40


def test_load_available_at():
    cfg = CacheConfig()
    assert load_available_at(10, True, cfg) == 50
    assert load_available_at(10, False, cfg) == 310


def test_branch_on_immediates_opens_no_frame():
    prog = assemble("MOVI r1, 1\nMOVI r2, 2\nBLT r1, r2, go\nHALT\ngo:\nHALT")
    arch, uarch, cfg = machine()
    result = run(prog, arch, uarch, cfg)
    assert result.trace.squashes == []
    assert result.trace.transient == []
    assert arch.pc == 4


def test_miss_window_runs_whole_fall_through():
    # branch at cycle 2, operand back at cycle 303: all 50 movis fit
    arch, uarch, cfg = machine({0x4000: 50})
    result = run(assemble(MISPREDICT_SRC), arch, uarch, cfg)
    squash = result.trace.squashes[0]
    assert squash.cause == "pht"
    assert squash.transient_count == 50
    assert arch.regs[3] == 0        # rolled back


def test_hit_window_caps_transients_at_latency():
    # warm line: load at cycle 1 resolves at 41; transients issue on
    # cycles 3..40, so exactly 38 fit before the squash
    arch, uarch, cfg = machine({0x4000: 50})
    uarch.cache.access(0x4000)
    result = run(assemble(MISPREDICT_SRC), arch, uarch, cfg)
    assert result.trace.squashes[0].transient_count == 38


def test_window_caps_transients():
    arch, uarch, cfg = machine({0x4000: 50}, window=8)
    result = run(assemble(MISPREDICT_SRC), arch, uarch, cfg)
    assert result.trace.squashes[0].transient_count == 8


def test_window_zero_runs_nothing_transiently():
    arch, uarch, cfg = machine({0x4000: 50}, window=0)
    result = run(assemble(MISPREDICT_SRC), arch, uarch, cfg)
    assert result.trace.squashes[0].transient_count == 0
    assert result.trace.transient_total() == 0


def test_mispredict_trains_predictor_and_keeps_cache():
    arch, uarch, cfg = machine({0x4000: 50})
    run(assemble(MISPREDICT_SRC), arch, uarch, cfg)
    assert uarch.pht.table[2] == 2          # replayed branch updated taken
    assert uarch.cache.contains(0x4000)     # not rolled back


def test_transient_store_never_reaches_memory():
    src = ("MOVI r2, 9\n"
           "LDB r1, r12, r0, 1\n"
           "BLT r2, r1, done\n"
           "ST r12, 256, r2\n"
           "done:\n    HALT\n")
    arch, uarch, cfg = machine({0x4000: 50})
    run(assemble(src), arch, uarch, cfg)
    assert arch.mem.read_byte(0x4000 + 256) == 0


def test_fence_blocks_transient_path():
    src = ("MOVI r2, 9\n"
           "LDB r1, r12, r0, 1\n"
           "BLT r2, r1, done\n"
           "FENCE\n"
           "ST r12, 256, r2\n"
           "done:\n    HALT\n")
    arch, uarch, cfg = machine({0x4000: 50})
    result = run(assemble(src), arch, uarch, cfg)
    squash = result.trace.squashes[0]
    assert squash.transient_count == 0          # fence stalls the frame shut
    fence_index = 3
    for transient in result.trace.transient:
        assert fence_index not in transient
    assert arch.mem.read_byte(0x4000 + 256) == 0


def test_store_to_load_forwarding():
    src = ("LDB r1, r12, r0, 1\n"     # mem[0x4000] = 0xAB, slow
           "ST r12, 64, r1\n"         # value pending, address known
           "MOVI r5, 64\n"
           "LDB r2, r12, r5, 1\n"     # forwards from the store buffer
           "HALT\n")
    arch, uarch, cfg = machine({0x4000: 0xAB})
    result = run(assemble(src), arch, uarch, cfg)
    assert arch.regs[2] == 0xAB
    assert arch.mem.read_byte(0x4040) == 0xAB
    assert result.trace.squashes == []


STL_SRC = ("LDB r1, r12, r0, 1\n"     # dep byte 0, flushed-cold: slow
           "MOVI r2, 0\n"
           "ADD r2, r12\n"
           "ADD r2, r1\n"             # r2 = 0x4000, available late
           "MOVI r3, 85\n"
           "ST r2, 64, r3\n"          # store 85 to 0x4040, address pending
           "MOVI r5, 64\n"
           "LDB r4, r12, r5, 1\n"     # may bypass and read stale 0
           "HALT\n")


def test_store_bypass_squashes_on_alias():
    arch, uarch, cfg = machine()
    result = run(assemble(STL_SRC), arch, uarch, cfg)
    assert [s.cause for s in result.trace.squashes] == ["stl"]
    assert arch.regs[4] == 85               # replay reads the fresh value
    assert arch.mem.read_byte(0x4040) == 85


def test_store_bypass_disabled_stalls_instead():
    arch, uarch, cfg = machine(store_bypass=False)
    result = run(assemble(STL_SRC), arch, uarch, cfg)
    assert result.trace.squashes == []
    assert arch.regs[4] == 85


def test_input_convention():
    prog = assemble("HALT")
    arch = ArchState.boot(MemoryImage(1 << 14))
    place_inputs(arch, [111, 222])
    assert arch.regs[15] == 111
    assert arch.regs[14] == 222
    with pytest.raises(ValueError):
        place_inputs(arch, list(range(9)))
    run(prog, arch, MicroArchState.fresh(), PipelineConfig())


def test_fetch_past_end_faults():
    prog = assemble("MOVI r1, 1")      # no HALT
    arch, uarch, cfg = machine()
    with pytest.raises(ProgramFault):
        run(prog, arch, uarch, cfg)
    ref = ArchState.boot(MemoryImage(1 << 16))
    with pytest.raises(ProgramFault):
        reference_run(prog, ref)


def test_committed_fault_parity_with_reference():
    rng = random.Random(31)
    for _ in range(200):
        prog = random_program(rng, allow_faults=True)
        inputs = [rng.randrange(1 << 16)]
        a1, a2 = fresh_arch(), fresh_arch()
        outcome1 = outcome2 = None
        try:
            run(prog, a1, MicroArchState.fresh(), PipelineConfig(), inputs)
        except (MemoryFault, ProgramFault) as exc:
            outcome1 = exc.identity()
        try:
            reference_run(prog, a2, inputs)
        except (MemoryFault, ProgramFault) as exc:
            outcome2 = exc.identity()
        assert outcome1 == outcome2
        if outcome1 is None:
            assert a1.equal_outputs(a2)


def test_differential_against_reference():
    rng = random.Random(1234)
    for _ in range(300):
        prog = random_program(rng)
        inputs = [rng.randrange(1 << 16)]
        a1, a2 = fresh_arch(), fresh_arch()
        run(prog, a1, MicroArchState.fresh(), PipelineConfig(), inputs)
        reference_run(prog, a2, inputs)
        assert a1.equal_outputs(a2)


def test_trace_serialises():
    arch, uarch, cfg = machine({0x4000: 50})
    result = run(assemble(MISPREDICT_SRC), arch, uarch, cfg)
    data = result.trace.to_dict()
    assert data["squashes"][0]["cause"] == "pht"
    assert data["total_cycles"] == result.trace.cycles
    assert isinstance(data["committed"], list)
