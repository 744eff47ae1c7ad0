import random

import pytest

from progden import random_program
from spectrelab.gadgets import GadgetSpec, build_gadget, standard_layout, VARIANTS
from spectrelab.isa import (AsmError, Fence, Halt, LabelImm, MovImm, Program,
                            assemble, disassemble)


def test_two_instruction_program():
    prog = assemble("FENCE\nHALT")
    assert len(prog) == 2
    assert prog.entry == 0
    assert isinstance(prog.instructions[0], Fence)
    assert isinstance(prog.instructions[1], Halt)


def test_empty_source_rejected():
    with pytest.raises(AsmError, match="empty program"):
        assemble("")
    with pytest.raises(AsmError, match="empty program"):
        assemble("# only a comment\n\n")


def test_labels_and_comments():
    prog = assemble("""\
# victim entry
start:
    MOVI r1, 5     # immediate
    BLT r0, r1, start
    HALT
""")
    assert prog.labels == {"start": 0}
    assert len(prog) == 3


def test_label_line_emitted_before_instruction():
    prog = assemble("MOVI r0, 1\nL0:\nHALT\n")
    text = disassemble(prog)
    lines = text.splitlines()
    assert lines[1] == "L0:"
    assert lines[2].strip() == "HALT"


def test_error_line_numbers():
    with pytest.raises(AsmError, match="line 2.*unknown mnemonic"):
        assemble("HALT\nBOGUS r1\n")
    with pytest.raises(AsmError, match="line 3.*duplicate label"):
        assemble("a:\nHALT\na:\nHALT\n")
    with pytest.raises(AsmError, match="unresolved label"):
        assemble("BLT r0, r1, nowhere\nHALT\n")
    with pytest.raises(AsmError, match="bad register"):
        assemble("MOVI r16, 1\nHALT\n")
    with pytest.raises(AsmError, match="scale"):
        assemble("LDB r0, r1, r2, 64\nHALT\n")
    with pytest.raises(AsmError, match="expects"):
        assemble("ADD r1\nHALT\n")


def test_trailing_label_rejected():
    with pytest.raises(AsmError, match="no instruction"):
        assemble("HALT\nend:\n")


def test_label_immediate_round_trip():
    prog = assemble("MOVI r1, @spot\nJI r1\nspot:\nHALT\n")
    inst = prog.instructions[0]
    assert isinstance(inst, MovImm) and inst.value == LabelImm("spot")
    assert assemble(disassemble(prog)) == prog


def test_gadget_sources_round_trip(config):
    layout = standard_layout(config.image_size)
    for variant in VARIANTS:
        gadget = build_gadget(variant, GadgetSpec(variant=variant, layout=layout))
        text = gadget.asm()
        reassembled = assemble(text)
        assert reassembled == gadget.program
        assert disassemble(reassembled).split() == text.split()


def test_fuzzed_round_trip():
    rng = random.Random(11)
    for _ in range(200):
        prog = random_program(rng)
        assert assemble(disassemble(prog)) == prog


def test_program_check_catches_bad_references():
    with pytest.raises(AsmError):
        Program((MovImm(1, 2),), {"ghost": 5})
    with pytest.raises(AsmError):
        Program((), {})
