"""Program-to-program mitigation passes and the variant x mitigation
effectiveness matrix.

Passes operate on assembled Programs and rebuild the label map after
inserting code, so label-immediates and data tables that name labels stay
correct. Canonical application order is index_mask, retpoline, rsb_stuff,
then fence_after_branch, so the barrier pass sees the final structure.
ssbd is a processor control, not a code transform: it clears the store
bypass policy in the run configuration and leaves the program alone.

Scratch registers are taken from registers the program never mentions and
re-zeroed before the next control transfer, so a transformed program is
architecturally indistinguishable from the original, with one documented
exception: passes that lower an indirect jump to a call/return sequence
clobber the link register r14, which is volatile across such lowering.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace

from .config import LabConfig
from .gadgets import VARIANTS, build_gadget, GadgetSpec, standard_layout
from .isa import (Add, And, BranchLess, Call, Fence, Halt, JumpIndirect,
                  LoadByte, MovImm, Program, Ret, SelectMask,
                  CONTROL_TRANSFER, BASE_REG, INPUT_REG, LINK_REG, NUM_REGS,
                  _registers_of)
from .receiver import leak_session

KINDS = ("fence_after_branch", "index_mask", "retpoline", "rsb_stuff", "ssbd")

# which variants each single mitigation is expected to block in this model
BLOCKS = {
    "fence_after_branch": {"pht", "btb", "rsb"},
    "index_mask": {"pht"},
    "retpoline": {"btb"},
    "rsb_stuff": {"rsb"},
    "ssbd": {"stl"},
}


class PatternNotFound(Exception):
    """A pass that needs a developer-identified code shape did not find it."""


class TransformError(Exception):
    pass


def expected_leak(variant: str, kinds) -> bool:
    return not any(variant in BLOCKS[k] for k in kinds)


# -- rebuild engine ------------------------------------------------------------

_CAPTURE = True
_NO_CAPTURE = False


class _Edit:
    """Accumulates insertions, replacements, and appended blocks, then
    rebuilds the program with a consistent label map.

    An insertion is a block placed before the instruction at a position.
    Capturing blocks take over labels bound to that position (a fence at
    a branch target must run for every jumper); non-capturing blocks
    leave the labels on the original instruction (a retpoline pad must
    not swallow jumps to the instruction after the call).
    """

    def __init__(self, program: Program):
        self.program = program
        self.inserts: dict[int, list[tuple[list, bool]]] = {}
        self.replacements: dict[int, object] = {}
        self.appends: list = []
        self.new_labels: dict[str, int] = {}
        self.changed = False

    def insert_before(self, pos: int, items: list, capture: bool) -> None:
        self.inserts.setdefault(pos, []).append((list(items), capture))
        self.changed = True

    def replace_at(self, pos: int, inst) -> None:
        self.replacements[pos] = inst
        self.changed = True

    def append_block(self, items: list) -> None:
        self.appends.extend(items)
        self.changed = True

    def fresh_label(self, stem: str) -> str:
        taken = set(self.program.labels) | set(self.new_labels) | {
            name for name, _ in _label_markers(self.appends)}
        n = 0
        while f"{stem}{n}" in taken:
            n += 1
        name = f"{stem}{n}"
        self.new_labels[name] = -1   # reserved; bound during build
        return name

    def build(self) -> Program:
        if not self.changed:
            return self.program
        out: list = []
        labels: dict[str, int] = {}

        def emit(items):
            for item in items:
                if isinstance(item, tuple) and item[0] == "label":
                    labels[item[1]] = len(out)
                else:
                    out.append(item)

        original = self.program
        for i, inst in enumerate(original.instructions):
            groups = self.inserts.get(i, [])
            capturing = [items for items, cap in groups if cap]
            passthrough = [items for items, cap in groups if not cap]
            bind = len(out)                 # start of capturing blocks
            for items in capturing:
                emit(items)
            for items in passthrough:
                emit(items)
            if not capturing:
                bind = len(out)             # labels skip passthrough blocks
            for name in original.labels_at(i):
                labels[name] = bind
            out.append(self.replacements.get(i, inst))
        emit(self.appends)
        return Program(tuple(out), labels)


def _label_markers(items) -> list:
    return [(item[1], i) for i, item in enumerate(items)
            if isinstance(item, tuple) and item[0] == "label"]


def _registers_used(program: Program) -> tuple[set, set]:
    """(mentioned anywhere, written) register id sets."""
    mentioned: set = set()
    written: set = set()
    for inst in program.instructions:
        mentioned.update(_registers_of(inst))
        dst = getattr(inst, "dst", None)
        if isinstance(dst, int):
            written.add(dst)
        if isinstance(inst, Call):
            written.add(LINK_REG)
    return mentioned, written


def _scratch_registers(program: Program, count: int) -> list[int]:
    """Registers the program never mentions, excluding the calling
    conventions (input, link, base)."""
    mentioned, _ = _registers_used(program)
    reserved = {INPUT_REG, LINK_REG, BASE_REG}
    free = [r for r in range(NUM_REGS) if r not in mentioned and r not in reserved]
    if len(free) < count:
        raise TransformError(
            f"transform needs {count} unused registers, found {len(free)}")
    return free[:count]


def _zero_register(program: Program) -> int:
    """A register the program never writes: always zero at run time."""
    _, written = _registers_used(program)
    reserved = {INPUT_REG, LINK_REG, BASE_REG}
    for r in range(NUM_REGS):
        if r not in written and r not in reserved:
            return r
    raise TransformError("no never-written register available")


# -- the passes ----------------------------------------------------------------

def fence_after_branch(program: Program) -> Program:
    """Insert a speculation barrier at the head of every path a predictor
    can steer to: after each control transfer and at every label."""
    positions = set()
    for i, inst in enumerate(program.instructions):
        if isinstance(inst, CONTROL_TRANSFER):
            positions.add(i + 1)
    positions.update(program.labels.values())
    positions.discard(len(program.instructions))
    if not positions:
        return program
    edit = _Edit(program)
    for pos in sorted(positions):
        edit.insert_before(pos, [Fence()], _CAPTURE)
    return edit.build()


def index_mask(program: Program) -> Program:
    """Clamp a bounds-checked index branchlessly before it is used.

    Recognises the shape `BLT x, bound, L` where the block at L loads a
    byte indexed by x and then loads again indexed by that byte. Inserts
    `SELMASK f, x, bound; AND x, f` at L, turning the control dependency
    into a data dependency on the bound, so a transient out-of-bounds x
    collapses to index zero (and, by depending on the slow bound, cannot
    form an address before the branch resolves anyway).

    Raises PatternNotFound when the program has no such site: this
    mitigation needs the developer to name the place to harden.
    """
    matches = []
    for i, inst in enumerate(program.instructions):
        if not isinstance(inst, BranchLess):
            continue
        target = program.labels[inst.label]
        first_load = None
        for j in range(target, len(program.instructions)):
            step = program.instructions[j]
            if first_load is None:
                if isinstance(step, LoadByte) and step.index == inst.a and step.scale == 1:
                    first_load = (j, step.dst)
                elif isinstance(step, (Halt,) + CONTROL_TRANSFER):
                    break
            else:
                if isinstance(step, LoadByte) and step.index == first_load[1]:
                    matches.append((i, inst, target, first_load[0]))
                    break
                if isinstance(step, (Halt,) + CONTROL_TRANSFER):
                    break
    if not matches:
        raise PatternNotFound(
            "index_mask: no bounds-checked dependent double-load to harden")
    scratch = _scratch_registers(program, 1)[0]
    edit = _Edit(program)
    for _, branch, target, first_load_pos in matches:
        edit.insert_before(target,
                           [SelectMask(scratch, branch.a, branch.b),
                            And(branch.a, scratch)], _CAPTURE)
        edit.insert_before(first_load_pos + 1, [MovImm(scratch, 0)], _CAPTURE)
    return edit.build()


def retpoline(program: Program) -> Program:
    """Replace each indirect jump with a call/return trampoline whose
    return stack entry pins speculation onto a fenced landing pad.

    The callee overwrites the link register with the real target and
    returns: the return predictor can only name the pad, which fences.
    Identity on programs without indirect jumps. Clobbers r14.
    """
    sites = [(i, inst) for i, inst in enumerate(program.instructions)
             if isinstance(inst, JumpIndirect)]
    if not sites:
        return program
    edit = _Edit(program)
    for i, inst in sites:
        if inst.reg == LINK_REG:
            raise TransformError(
                "cannot retpoline an indirect jump through the link register")
        setup = edit.fresh_label("rp_setup_")
        edit.replace_at(i, Call(setup))
        edit.insert_before(i + 1, [Fence(), Halt()], _NO_CAPTURE)
        edit.append_block([("label", setup),
                           MovImm(LINK_REG, 0),
                           Add(LINK_REG, inst.reg),
                           Ret()])
    return edit.build()


def rsb_stuff(program: Program) -> Program:
    """Before each return, push a benign fenced landing onto the return
    stack, so a mispredicted return speculates into a barrier.

    The stuffing call clobbers the live return target, so it is saved in
    a scratch register and restored (and the scratch re-zeroed) before
    the actual return. Identity on programs without returns.
    """
    sites = [i for i, inst in enumerate(program.instructions)
             if isinstance(inst, Ret)]
    if not sites:
        return program
    save, one = _scratch_registers(program, 2)
    zero = _zero_register(program)
    edit = _Edit(program)
    for i in sites:
        fill = edit.fresh_label("rsb_fill_")
        cont = edit.fresh_label("rsb_cont_")
        edit.insert_before(i, [
            Add(save, LINK_REG),          # save the live return target
            Call(fill),                   # pushes the fence below onto the RSB
            Fence(),                      # speculation landing for this return
            ("label", cont),
            MovImm(LINK_REG, 0),
            Add(LINK_REG, save),          # restore return target
            MovImm(save, 0),
            MovImm(one, 0),
        ], _CAPTURE)
        edit.append_block([("label", fill),
                           MovImm(one, 1),
                           BranchLess(zero, one, cont),   # 0 < 1: always taken
                           Halt()])
    return edit.build()


_PASSES = {
    "index_mask": index_mask,
    "retpoline": retpoline,
    "rsb_stuff": rsb_stuff,
    "fence_after_branch": fence_after_branch,
}
_ORDER = ("index_mask", "retpoline", "rsb_stuff", "fence_after_branch")


def _check_kinds(kinds) -> tuple:
    kinds = tuple(kinds)
    unknown = [k for k in kinds if k not in KINDS]
    if unknown:
        raise TransformError(f"unknown mitigation kinds: {unknown}")
    return kinds


def apply(kinds, program: Program) -> Program:
    """Apply a mitigation set in canonical order. index_mask raises
    PatternNotFound rather than silently matching nothing; the other
    passes are identities on programs without their shapes. ssbd does
    not change programs."""
    kinds = _check_kinds(kinds)
    for kind in _ORDER:
        if kind in kinds:
            program = _PASSES[kind](program)
    return program


def apply_with_report(kinds, program: Program) -> tuple[Program, dict]:
    """As apply(), but index_mask misses are recorded instead of raised;
    returns (program, {kind: whether it changed anything}) for matrix cells."""
    kinds = _check_kinds(kinds)
    applied = {}
    for kind in _ORDER:
        if kind not in kinds:
            continue
        before = program
        try:
            program = _PASSES[kind](program)
        except PatternNotFound:
            applied[kind] = False
            continue
        applied[kind] = program is not before
    if "ssbd" in kinds:
        applied["ssbd"] = True
    return program, applied


# -- effectiveness evaluation ---------------------------------------------------

@dataclass
class CellResult:
    variant: str
    mitigations: tuple
    leaked: bool
    bytes_recovered: int
    transient_count: int
    applied: dict

    def to_dict(self) -> dict:
        return {"variant": self.variant,
                "mitigations": list(self.mitigations),
                "leaked": self.leaked,
                "bytes_recovered": self.bytes_recovered,
                "transient_count": self.transient_count,
                "applied": dict(self.applied)}


def evaluate(variant: str, kinds, config: LabConfig) -> CellResult:
    """Build the variant's victim, mitigate it, run the full recovery,
    and report whether at least one secret byte came back correctly."""
    kinds = tuple(sorted(_check_kinds(kinds)))
    layout = standard_layout(config.image_size, config.aslr_seed,
                             data_len=config.data_len,
                             secret_len=len(config.secret_bytes()))
    gadget = build_gadget(variant, GadgetSpec(
        variant=variant, layout=layout, training_rounds=config.training_rounds))
    program, applied = apply_with_report(kinds, gadget.program)
    run_config = replace(config, store_bypass=config.store_bypass
                         and "ssbd" not in kinds)
    session, receiver = leak_session(run_config, variant,
                                     program=program, gadget=gadget)
    report = receiver.recover_secret()
    secret = config.secret_bytes()
    correct = sum(1 for i, b in enumerate(report.recovered)
                  if b is not None and i < len(secret) and b == secret[i])
    return CellResult(variant=variant, mitigations=kinds,
                      leaked=correct >= 1, bytes_recovered=correct,
                      transient_count=session.stats.transient_total,
                      applied=applied)


@dataclass
class MatrixReport:
    cells: list

    def cell(self, variant: str, kinds) -> CellResult:
        key = tuple(sorted(kinds))
        for c in self.cells:
            if c.variant == variant and c.mitigations == key:
                return c
        raise KeyError((variant, key))

    def baseline_ok(self) -> bool:
        return all(self.cell(v, ()).leaked for v in VARIANTS)

    def mismatches(self) -> list:
        wrong = []
        for c in self.cells:
            if c.leaked != expected_leak(c.variant, c.mitigations):
                wrong.append(c)
        return wrong

    def matches_expected(self) -> bool:
        return not self.mismatches()

    def monotone(self) -> bool:
        """Adding mitigations never turns a blocked cell leaky."""
        for a in self.cells:
            for b in self.cells:
                if (a.variant == b.variant
                        and set(a.mitigations) < set(b.mitigations)
                        and not a.leaked and b.leaked):
                    return False
        return True

    def to_dict(self) -> dict:
        return {"cells": [c.to_dict() for c in self.cells]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """Fixed column order; golden files depend on it."""
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["variant", "mitigations", "leaked",
                         "bytes_recovered", "transient_count"])
        for c in self.cells:
            writer.writerow([c.variant, "+".join(c.mitigations) or "none",
                             str(c.leaked).lower(), c.bytes_recovered,
                             c.transient_count])
        return out.getvalue()


def full_matrix(config: LabConfig) -> MatrixReport:
    """Evaluate all four variants against no mitigation, each single
    mitigation, and all mitigations combined. Deterministic given the
    configuration."""
    sets = [()] + [(k,) for k in KINDS] + [tuple(KINDS)]
    cells = [evaluate(variant, kinds, config)
             for variant in VARIANTS for kinds in sets]
    return MatrixReport(cells=cells)
