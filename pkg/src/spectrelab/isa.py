"""Minimal instruction set, textual assembly format, and program container.

Grammar (stable; golden files depend on it):

    line     := [label ':'] | instruction | comment | blank
    comment  := '#' to end of line (also allowed after an instruction)
    label    := identifier, flush left, suffixed ':'
    instr    := MNEMONIC operand (',' operand)*

    LDB     dst, base, index, scale   load byte: dst = mem[R[base] + R[index]*scale]
    ST      base, offset, src         store byte: mem[R[base] + offset] = low8(R[src])
    MOVI    dst, imm                  imm is an integer or '@label' (instruction index)
    ADD     dst, src                  dst += src (src = register or immediate)
    AND     dst, src                  dst &= src
    SHL     dst, src                  dst <<= (src & 63)
    BLT     a, b, label               branch to label iff R[a] < R[b] (unsigned)
    JI      reg                       jump to instruction index held in reg
    CALL    label                     r14 = return index; push return index; jump
    RET                               jump to index in r14 (return prediction via RSB)
    FLUSH   base, offset              evict the cache line of R[base] + offset
    FENCE                             speculation barrier: drain frames, stores, loads
    SELMASK dst, a, b                 dst = ~0 if R[a] < R[b] else 0 (branchless)
    HALT

Registers are r0..r15, 64-bit, arithmetic modulo 2**64. Scale is 1 or 4096.
Register conventions (used by every emitted victim, documented here once):
r15, r14, ... receive run inputs in order; r14 is the link register written
by CALL; r13 holds the memory region base by convention. No instruction
encodes an absolute data address, so layouts stay relocatable.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

from .memory import PAGE_SIZE

NUM_REGS = 16
WORD_MASK = (1 << 64) - 1
SCALES = (1, PAGE_SIZE)

INPUT_REG = 15   # first input value; further inputs fill r14, r13, ...
LINK_REG = 14    # written by CALL, consumed by RET
BASE_REG = 13    # gadget convention: region base pointer


class AsmError(Exception):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Imm:
    """Immediate operand where a register would otherwise be accepted."""
    value: int


@dataclass(frozen=True)
class LabelImm:
    """Immediate that resolves to a label's instruction index at run time.

    Kept symbolic inside the instruction so program transforms that insert
    code re-resolve it against the rebuilt label map.
    """
    name: str


@dataclass(frozen=True)
class LoadByte:
    dst: int
    base: int
    index: int
    scale: int


@dataclass(frozen=True)
class Store:
    base: int
    offset: int
    src: int


@dataclass(frozen=True)
class MovImm:
    dst: int
    value: Union[int, LabelImm]


@dataclass(frozen=True)
class Add:
    dst: int
    src: Union[int, Imm]


@dataclass(frozen=True)
class And:
    dst: int
    src: Union[int, Imm]


@dataclass(frozen=True)
class Shl:
    dst: int
    src: Union[int, Imm]


@dataclass(frozen=True)
class BranchLess:
    a: int
    b: int
    label: str


@dataclass(frozen=True)
class JumpIndirect:
    reg: int


@dataclass(frozen=True)
class Call:
    label: str


@dataclass(frozen=True)
class Ret:
    pass


@dataclass(frozen=True)
class Flush:
    base: int
    offset: int


@dataclass(frozen=True)
class Fence:
    pass


@dataclass(frozen=True)
class SelectMask:
    dst: int
    a: int
    b: int


@dataclass(frozen=True)
class Halt:
    pass


Instruction = Union[LoadByte, Store, MovImm, Add, And, Shl, BranchLess,
                    JumpIndirect, Call, Ret, Flush, Fence, SelectMask, Halt]

CONTROL_TRANSFER = (BranchLess, JumpIndirect, Call, Ret)


@dataclass(frozen=True)
class Program:
    """Assembled program: instruction tuple plus name -> index label map.

    Immutable after construction; transforms build new Programs.
    """
    instructions: tuple[Instruction, ...]
    labels: dict[str, int]
    entry: int = 0

    def __post_init__(self):
        problems = self.check()
        if problems:
            raise AsmError("; ".join(problems))

    def check(self) -> list[str]:
        problems = []
        n = len(self.instructions)
        if n == 0:
            problems.append("empty program")
            return problems
        if not 0 <= self.entry < n:
            problems.append(f"entry {self.entry} out of range")
        for name, idx in self.labels.items():
            if not 0 <= idx < n:
                problems.append(f"label {name!r} points outside the program")
        for i, inst in enumerate(self.instructions):
            for reg in _registers_of(inst):
                if not 0 <= reg < NUM_REGS:
                    problems.append(f"instruction {i}: register r{reg} out of range")
            if isinstance(inst, LoadByte) and inst.scale not in SCALES:
                problems.append(f"instruction {i}: scale {inst.scale} not in {SCALES}")
            label = _label_of(inst)
            if label is not None and label not in self.labels:
                problems.append(f"instruction {i}: unresolved label {label!r}")
            if isinstance(inst, MovImm) and isinstance(inst.value, LabelImm) \
                    and inst.value.name not in self.labels:
                problems.append(f"instruction {i}: unresolved label {inst.value.name!r}")
        return problems

    def labels_at(self, index: int) -> list[str]:
        return [name for name, idx in self.labels.items() if idx == index]

    def __len__(self) -> int:
        return len(self.instructions)


def _registers_of(inst: Instruction) -> list[int]:
    regs = []
    for field_name in ("dst", "base", "index", "src", "a", "b", "reg"):
        value = getattr(inst, field_name, None)
        if isinstance(value, int):  # Imm/LabelImm operands are not registers
            regs.append(value)
    return regs


def _label_of(inst: Instruction) -> str | None:
    if isinstance(inst, (BranchLess, Call)):
        return inst.label
    return None


# --- assembler ---------------------------------------------------------------

_MNEMONICS = {
    "LDB": LoadByte, "ST": Store, "MOVI": MovImm, "ADD": Add, "AND": And,
    "SHL": Shl, "BLT": BranchLess, "JI": JumpIndirect, "CALL": Call,
    "RET": Ret, "FLUSH": Flush, "FENCE": Fence, "SELMASK": SelectMask,
    "HALT": Halt,
}

_IDENT_OK = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_")


def _parse_reg(tok: str, line: int) -> int:
    if tok.startswith("r") and tok[1:].isdigit():
        n = int(tok[1:])
        if 0 <= n < NUM_REGS:
            return n
    raise AsmError(f"bad register {tok!r}", line)


def _parse_int(tok: str, line: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise AsmError(f"bad integer {tok!r}", line) from None


def _parse_label(tok: str, line: int) -> str:
    if tok and all(c in _IDENT_OK for c in tok) and not tok[0].isdigit():
        return tok
    raise AsmError(f"bad label {tok!r}", line)


def _parse_reg_or_imm(tok: str, line: int) -> Union[int, Imm]:
    if tok.startswith("r") and tok[1:].isdigit():
        return _parse_reg(tok, line)
    return Imm(_parse_int(tok, line))


def assemble(text: str) -> Program:
    """Assemble source text into a Program.

    Raises AsmError with a line number for unknown mnemonics, operand
    mistakes, duplicate labels and unresolved label references.
    """
    instructions: list[Instruction] = []
    labels: dict[str, int] = {}
    references: list[tuple[str, int]] = []

    label_re = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*:\s*(.*)$")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        while (m := label_re.match(line)) is not None:
            name = m.group(1)
            if name in labels:
                raise AsmError(f"duplicate label {name!r}", lineno)
            labels[name] = len(instructions)
            line = m.group(2)
        if not line:
            continue
        parts = line.split(None, 1)
        mnem = parts[0].upper()
        if mnem not in _MNEMONICS:
            raise AsmError(f"unknown mnemonic {parts[0]!r}", lineno)
        ops = [t.strip() for t in parts[1].split(",")] if len(parts) > 1 else []
        instructions.append(_parse_operands(mnem, ops, lineno, references))

    if not instructions:
        raise AsmError("empty program")
    for name, lineno in references:
        if name not in labels:
            raise AsmError(f"unresolved label {name!r}", lineno)
    for name, idx in labels.items():
        if idx >= len(instructions):
            raise AsmError(f"label {name!r} has no instruction")
    return Program(tuple(instructions), labels)


def _parse_operands(mnem: str, ops: list[str], line: int,
                    references: list[tuple[str, int]]) -> Instruction:
    def need(n):
        if len(ops) != n:
            raise AsmError(f"{mnem} expects {n} operands, got {len(ops)}", line)

    if mnem == "LDB":
        need(4)
        scale = _parse_int(ops[3], line)
        if scale not in SCALES:
            raise AsmError(f"scale must be one of {SCALES}", line)
        return LoadByte(_parse_reg(ops[0], line), _parse_reg(ops[1], line),
                        _parse_reg(ops[2], line), scale)
    if mnem == "ST":
        need(3)
        return Store(_parse_reg(ops[0], line), _parse_int(ops[1], line),
                     _parse_reg(ops[2], line))
    if mnem == "MOVI":
        need(2)
        if ops[1].startswith("@"):
            name = _parse_label(ops[1][1:], line)
            references.append((name, line))
            return MovImm(_parse_reg(ops[0], line), LabelImm(name))
        return MovImm(_parse_reg(ops[0], line), _parse_int(ops[1], line) & WORD_MASK)
    if mnem in ("ADD", "AND", "SHL"):
        need(2)
        cls = _MNEMONICS[mnem]
        return cls(_parse_reg(ops[0], line), _parse_reg_or_imm(ops[1], line))
    if mnem == "BLT":
        need(3)
        name = _parse_label(ops[2], line)
        references.append((name, line))
        return BranchLess(_parse_reg(ops[0], line), _parse_reg(ops[1], line), name)
    if mnem == "JI":
        need(1)
        return JumpIndirect(_parse_reg(ops[0], line))
    if mnem == "CALL":
        need(1)
        name = _parse_label(ops[0], line)
        references.append((name, line))
        return Call(name)
    if mnem == "RET":
        need(0)
        return Ret()
    if mnem == "FLUSH":
        need(2)
        return Flush(_parse_reg(ops[0], line), _parse_int(ops[1], line))
    if mnem == "FENCE":
        need(0)
        return Fence()
    if mnem == "SELMASK":
        need(3)
        return SelectMask(_parse_reg(ops[0], line), _parse_reg(ops[1], line),
                          _parse_reg(ops[2], line))
    if mnem == "HALT":
        need(0)
        return Halt()
    raise AsmError(f"unknown mnemonic {mnem!r}", line)


# --- disassembler ------------------------------------------------------------

def _fmt_src(src: Union[int, Imm]) -> str:
    return f"r{src}" if isinstance(src, int) else str(src.value)


def _fmt(inst: Instruction) -> str:
    if isinstance(inst, LoadByte):
        return f"LDB r{inst.dst}, r{inst.base}, r{inst.index}, {inst.scale}"
    if isinstance(inst, Store):
        return f"ST r{inst.base}, {inst.offset}, r{inst.src}"
    if isinstance(inst, MovImm):
        value = f"@{inst.value.name}" if isinstance(inst.value, LabelImm) else str(inst.value)
        return f"MOVI r{inst.dst}, {value}"
    if isinstance(inst, Add):
        return f"ADD r{inst.dst}, {_fmt_src(inst.src)}"
    if isinstance(inst, And):
        return f"AND r{inst.dst}, {_fmt_src(inst.src)}"
    if isinstance(inst, Shl):
        return f"SHL r{inst.dst}, {_fmt_src(inst.src)}"
    if isinstance(inst, BranchLess):
        return f"BLT r{inst.a}, r{inst.b}, {inst.label}"
    if isinstance(inst, JumpIndirect):
        return f"JI r{inst.reg}"
    if isinstance(inst, Call):
        return f"CALL {inst.label}"
    if isinstance(inst, Ret):
        return "RET"
    if isinstance(inst, Flush):
        return f"FLUSH r{inst.base}, {inst.offset}"
    if isinstance(inst, Fence):
        return "FENCE"
    if isinstance(inst, SelectMask):
        return f"SELMASK r{inst.dst}, r{inst.a}, r{inst.b}"
    if isinstance(inst, Halt):
        return "HALT"
    raise TypeError(f"not an instruction: {inst!r}")


def disassemble(program: Program) -> str:
    """Render a Program as canonical assembly text.

    assemble(disassemble(p)) is structurally equal to p.
    """
    by_index: dict[int, list[str]] = {}
    for name, idx in program.labels.items():
        by_index.setdefault(idx, []).append(name)
    lines = []
    for i, inst in enumerate(program.instructions):
        for name in sorted(by_index.get(i, [])):
            lines.append(f"{name}:")
        lines.append(f"    {_fmt(inst)}")
    return "\n".join(lines) + "\n"
