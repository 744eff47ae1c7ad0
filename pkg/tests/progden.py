"""Random program generator for round-trip and differential fuzzing.

Programs are loop-free by construction (branch and jump targets only go
forward, calls target a single trailing subroutine), so both engines
terminate without hitting the step budget. Memory operands stay inside a
64 KiB scratch window reached through r12, with byte-masked indices, so
well-formed programs never fault; `allow_faults` drops the masking on a
small fraction of loads to exercise fault parity instead.
"""
from __future__ import annotations

import random

from spectrelab.isa import (Add, And, BranchLess, Call, Fence, Flush, Halt,
                            Imm, JumpIndirect, LabelImm, LoadByte, MovImm,
                            Program, Ret, SelectMask, Shl, Store)
from spectrelab.memory import MemoryImage
from spectrelab.pipeline import ArchState

SCRATCH_BASE = 0x4000
SCRATCH_REG = 12
DATA_REGS = list(range(0, 11))   # r11 reserved for jump targets


def random_program(rng: random.Random, *, max_body: int = 24,
                   allow_faults: bool = False) -> Program:
    items: list = []   # instructions and ("label", name) markers
    labels_pending: list[str] = []
    label_count = 0
    has_sub = rng.random() < 0.5

    def reg():
        return rng.choice(DATA_REGS)

    def emit_masked_load():
        idx = reg()
        if allow_faults and rng.random() < 0.1:
            items.append(LoadByte(reg(), reg(), idx, 1))
            return
        items.append(And(idx, Imm(0xFF)))
        items.append(LoadByte(reg(), SCRATCH_REG, idx, 1))

    def new_forward_label():
        nonlocal label_count
        name = f"fwd{label_count}"
        label_count += 1
        labels_pending.append(name)
        return name

    def maybe_place_labels():
        while labels_pending and rng.random() < 0.5:
            items.append(("label", labels_pending.pop()))

    body = rng.randrange(4, max_body)
    for _ in range(body):
        maybe_place_labels()
        roll = rng.random()
        if roll < 0.22:
            items.append(MovImm(reg(), rng.randrange(0, 1 << 16)))
        elif roll < 0.40:
            op = rng.choice([Add, And, Shl])
            src = rng.choice([reg(), Imm(rng.randrange(0, 64))])
            items.append(op(reg(), src))
        elif roll < 0.48:
            items.append(SelectMask(reg(), reg(), reg()))
        elif roll < 0.62:
            emit_masked_load()
        elif roll < 0.72:
            items.append(Store(SCRATCH_REG, rng.randrange(0, 0x1000), reg()))
        elif roll < 0.82 and not allow_faults:
            items.append(BranchLess(reg(), reg(), new_forward_label()))
        elif roll < 0.86 and not allow_faults:
            target = new_forward_label()
            items.append(MovImm(11, LabelImm(target)))
            items.append(JumpIndirect(11))
            items.append(("label", f"dead{label_count}"))
            label_count += 1
        elif roll < 0.92:
            items.append(Flush(SCRATCH_REG, rng.randrange(0, 0x1000)))
        elif roll < 0.96 and has_sub and not allow_faults:
            items.append(Call("sub"))
        else:
            items.append(Fence())
    for name in labels_pending:
        items.append(("label", name))
    items.append(Halt())
    if has_sub:
        items.append(("label", "sub"))
        for _ in range(rng.randrange(1, 4)):
            items.append(MovImm(reg(), rng.randrange(0, 256)))
        items.append(Ret())

    instructions = []
    labels = {}
    for item in items:
        if isinstance(item, tuple):
            labels[item[1]] = len(instructions)
        else:
            instructions.append(item)
    for name, idx in list(labels.items()):
        if idx >= len(instructions):    # trailing label: pin to the Halt
            labels[name] = len(instructions) - 1
    return Program(tuple(instructions), labels)


def fresh_arch(image_size: int = 1 << 16) -> ArchState:
    arch = ArchState.boot(MemoryImage(image_size))
    arch.regs[SCRATCH_REG] = SCRATCH_BASE
    return arch
