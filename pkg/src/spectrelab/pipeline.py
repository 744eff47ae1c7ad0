"""Speculative in-order pipeline with squash-and-rollback, plus the
non-speculative reference interpreter used as a correctness oracle.

Timing model
------------
Issue is in order, one instruction per cycle. Every register carries an
availability cycle: immediates are ready the next cycle, ALU results one
cycle after their operands arrive (forwarding, no stall), load results
after the cache hit or miss latency. Loads and flushes stall until their
address operands are available, because the cache access physically needs
the address. Control flow does not stall: a branch, indirect jump, or
return whose operands are still in flight is *predicted* (PHT, BTB, RSB
respectively) and execution continues down the predicted path inside a
speculation frame.

A frame checkpoints the registers and pc. At most one frame is live; a
second predictable branch inside a frame follows its prediction but opens
no new checkpoint, it only adds a resolution obligation. When the frame's
last obligation resolves, either every prediction was right and the
transient instructions commit, or the checkpoint is restored and execution
replays from the checkpointed instruction, whose operands are by then
available. Only the architectural state is restored: cache contents and
predictor state keep whatever the transient instructions did to them.

Stores issue without stalling into a pending-store queue and are applied
to memory in program order once their operands arrive. A pending store
whose address is still unknown is speculatively bypassed by younger loads
when store bypass is enabled: the load reads the stale memory value inside
a frame that squashes if the addresses turn out to alias. A pending store
with a known address forwards its value to aliasing loads. Transient
stores stay buffered in the queue and are dropped on squash.

Faults: a committed access outside the memory image raises MemoryFault
(architectural). A transient access outside the image raises ModelError,
because region bounds inside the image are conventions and nothing else
should ever be reachable; out-of-region transient loads *inside* the
image are exactly the Spectre access pattern and proceed silently.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .cache import Cache, CacheConfig
from .isa import (Add, And, BranchLess, Call, Fence, Flush, Halt, Imm,
                  JumpIndirect, LabelImm, LoadByte, MovImm, Program, Ret,
                  SelectMask, Shl, Store, LINK_REG, NUM_REGS, WORD_MASK)
from .memory import MemoryFault, MemoryImage, ModelError
from .predictors import Btb, Pht, Rsb


class ProgramFault(Exception):
    """Architectural control transfer outside the program."""

    def __init__(self, kind: str, target: int):
        self.kind = kind
        self.target = target
        super().__init__(f"{kind} to invalid instruction index {target}")

    def identity(self) -> tuple[str, int]:
        return (self.kind, self.target)


@dataclass
class PipelineConfig:
    window: int = 64              # max transient instructions per frame
    pht_enabled: bool = True
    btb_enabled: bool = True
    rsb_enabled: bool = True
    stl_enabled: bool = True
    store_bypass: bool = True     # policy knob; bypass needs stl_enabled too
    max_steps: int = 1_000_000

    def __post_init__(self):
        if self.window < 0:
            raise ValueError("speculation window must be >= 0")


@dataclass
class ArchState:
    """Architectural state: the part a squash rolls back (registers, pc)
    plus memory, whose transient stores never land in the first place."""
    regs: list[int]
    mem: MemoryImage
    pc: int = 0
    halted: bool = False

    @classmethod
    def boot(cls, mem: MemoryImage, base_reg_value: int | None = None) -> "ArchState":
        regs = [0] * NUM_REGS
        if base_reg_value is not None:
            regs[13] = base_reg_value
        return cls(regs=regs, mem=mem)

    def equal_outputs(self, other: "ArchState") -> bool:
        return (self.regs == other.regs and self.pc == other.pc
                and self.halted == other.halted
                and self.mem.data == other.mem.data)


@dataclass
class MicroArchState:
    """Microarchitectural state: survives squashes unmodified except by
    the transient instructions themselves."""
    cache: Cache
    pht: Pht
    btb: Btb
    rsb: Rsb
    cycle: int = 0

    @classmethod
    def fresh(cls, cache_config: CacheConfig | None = None, *,
              pht_size: int = 1024, btb_entries: int = 256,
              rsb_depth: int = 16) -> "MicroArchState":
        return cls(cache=Cache(cache_config), pht=Pht(pht_size),
                   btb=Btb(btb_entries), rsb=Rsb(rsb_depth))


@dataclass
class SquashEvent:
    cause: str                 # pht | btb | rsb | stl
    transient_count: int
    cycle: int
    pc: int                    # checkpointed instruction index

    def to_dict(self) -> dict:
        return {"cause": self.cause, "transient_count": self.transient_count,
                "cycle": self.cycle, "pc": self.pc}


@dataclass
class ExecutionTrace:
    committed: list[int] = field(default_factory=list)
    transient: list[list[int]] = field(default_factory=list)  # one list per squash
    squashes: list[SquashEvent] = field(default_factory=list)
    cycles: int = 0

    def squash_causes(self) -> list[str]:
        return [s.cause for s in self.squashes]

    def transient_total(self) -> int:
        return sum(s.transient_count for s in self.squashes)

    def to_dict(self) -> dict:
        return {
            "committed": list(self.committed),
            "transient_per_squash": [list(t) for t in self.transient],
            "squashes": [s.to_dict() for s in self.squashes],
            "total_cycles": self.cycles,
        }


@dataclass
class RunResult:
    arch: ArchState
    uarch: MicroArchState
    trace: ExecutionTrace


def load_available_at(issue_cycle: int, hit: bool, config: CacheConfig) -> int:
    """Cycle at which a load issued at issue_cycle produces its value."""
    return issue_cycle + (config.hit_latency if hit else config.miss_latency)


def place_inputs(arch: ArchState, inputs) -> None:
    """Input convention: inputs[0] -> r15, inputs[1] -> r14, and so on.

    CALL writes r14, so programs taking two or more inputs must copy them
    before calling. At most eight inputs are accepted.
    """
    values = list(inputs)
    if len(values) > 8:
        raise ValueError("at most 8 input values are supported")
    for i, v in enumerate(values):
        arch.regs[15 - i] = v & WORD_MASK


@dataclass
class _PendingStore:
    seq: int
    addr: int
    value: int
    addr_avail: int
    resolve_at: int
    transient: bool


@dataclass
class _Obligation:
    kind: str                  # pht | btb | rsb | stl
    ok: bool
    resolve_at: int
    update: tuple | None = None   # deferred predictor update on commit


class _Frame:
    def __init__(self, regs: list[int], avail: list[int], pc: int, cycle: int,
                 opened_by_load: bool):
        self.regs = list(regs)
        self.avail = list(avail)
        self.pc = pc
        self.opened = cycle
        self.opened_by_load = opened_by_load
        self.resolve_at = cycle
        self.obligations: list[_Obligation] = []
        self.transient: list[int] = []

    def add(self, ob: _Obligation) -> None:
        self.obligations.append(ob)
        self.resolve_at = max(self.resolve_at, ob.resolve_at)


class _Machine:
    def __init__(self, program: Program, arch: ArchState, uarch: MicroArchState,
                 cfg: PipelineConfig):
        self.program = program
        self.arch = arch
        self.uarch = uarch
        self.cfg = cfg
        self.avail = [uarch.cycle] * NUM_REGS
        self.pending: list[_PendingStore] = []
        self.frame: _Frame | None = None
        self.trace = ExecutionTrace()
        self.steps = 0
        self.seq = 0

    # -- small helpers --------------------------------------------------

    @property
    def now(self) -> int:
        return self.uarch.cycle

    def _src_value(self, src) -> int:
        return src.value & WORD_MASK if isinstance(src, Imm) else self.arch.regs[src]

    def _src_avail(self, src) -> int:
        return 0 if isinstance(src, Imm) else self.avail[src]

    def _label_index(self, name: str) -> int:
        return self.program.labels[name]

    def _bypass_allowed(self) -> bool:
        return (self.cfg.stl_enabled and self.cfg.store_bypass
                and self.cfg.window > 0)

    def _in_frame(self) -> bool:
        return self.frame is not None

    def _jump(self, target: int, kind: str) -> None:
        if not 0 <= target < len(self.program):
            if self._in_frame():
                raise ModelError(
                    f"transient {kind} left the program (target {target})")
            raise ProgramFault(kind, target)
        self.arch.pc = target

    # -- pending store machinery ----------------------------------------

    def _apply_ready_stores(self) -> None:
        """Apply resolved stores to memory in program order; the head
        blocks the tail so architectural order is preserved."""
        while self.pending:
            st = self.pending[0]
            if st.transient or st.resolve_at > self.now:
                break
            self.pending.pop(0)
            self._apply_store(st)

    def _apply_store(self, st: _PendingStore) -> None:
        self.arch.mem.write_byte(st.addr, st.value)   # MemoryFault if outside image
        self.uarch.cache.access(st.addr)              # write-allocate

    def _drain_stores(self) -> None:
        while self.pending:
            st = self.pending.pop(0)
            self.uarch.cycle = max(self.uarch.cycle, st.resolve_at)
            self._apply_store(st)

    # -- issue requirements ----------------------------------------------

    def _issue_need(self, inst) -> int:
        """Earliest cycle at which inst may issue (0 = no constraint).

        Control flow that can be predicted reports no constraint; the
        prediction happens in dispatch. Everything else stalls on its
        operands, and loads additionally stall on older unresolved store
        addresses when bypassing is not allowed.
        """
        a = self.avail
        if isinstance(inst, LoadByte):
            need = max(a[inst.base], a[inst.index])
            if not self._bypass_allowed():
                for st in self.pending:
                    need = max(need, st.addr_avail)
            return need
        if isinstance(inst, Flush):
            return a[inst.base]
        if isinstance(inst, BranchLess):
            op = max(a[inst.a], a[inst.b])
            if op <= self.now or self.cfg.pht_enabled:
                return 0   # resolvable now, or predictable
            return op
        if isinstance(inst, JumpIndirect):
            op = a[inst.reg]
            if op <= self.now:
                return 0
            if not self.cfg.btb_enabled or self.uarch.btb.predict(self.arch.pc) is None:
                return op
            return 0
        if isinstance(inst, Ret):
            op = a[LINK_REG]
            if op <= self.now:
                return 0
            if not self.cfg.rsb_enabled or self.uarch.rsb.peek() is None:
                return op
            return 0
        if isinstance(inst, Fence):
            need = max(a)
            for st in self.pending:
                need = max(need, st.resolve_at)
            if self._in_frame():
                need = max(need, self.frame.resolve_at)
            return need
        if isinstance(inst, Halt) and self._in_frame():
            return self.frame.resolve_at
        return 0

    # -- frame machinery ---------------------------------------------------

    def _open_frame(self, opened_by_load: bool) -> None:
        if self.frame is None:
            self.frame = _Frame(self.arch.regs, self.avail, self.arch.pc,
                                self.now, opened_by_load)

    def _finish_frame(self) -> None:
        fr = self.frame
        self.uarch.cycle = max(self.uarch.cycle, fr.resolve_at)
        if all(ob.ok for ob in fr.obligations):
            for ob in fr.obligations:
                self._apply_update(ob.update)
            for st in self.pending:
                st.transient = False
            if not fr.opened_by_load:
                self.trace.committed.append(fr.pc)
            self.trace.committed.extend(fr.transient)
            self.frame = None
            self._apply_ready_stores()
        else:
            cause = next(ob.kind for ob in fr.obligations if not ob.ok)
            self.trace.squashes.append(SquashEvent(
                cause=cause, transient_count=len(fr.transient),
                cycle=self.now, pc=fr.pc))
            self.trace.transient.append(list(fr.transient))
            self.arch.regs[:] = fr.regs
            self.avail[:] = fr.avail
            self.arch.pc = fr.pc
            self.pending = [st for st in self.pending if not st.transient]
            self.frame = None

    def _apply_update(self, update: tuple | None) -> None:
        if update is None:
            return
        kind, site, value = update
        if kind == "pht":
            self.uarch.pht.update(site, value)
        elif kind == "btb":
            self.uarch.btb.update(site, value)

    # -- dispatch ----------------------------------------------------------

    def _dispatch(self, inst, t: int) -> None:
        regs = self.arch.regs
        pc = self.arch.pc
        if isinstance(inst, MovImm):
            value = (self._label_index(inst.value.name)
                     if isinstance(inst.value, LabelImm) else inst.value)
            regs[inst.dst] = value & WORD_MASK
            self.avail[inst.dst] = t + 1
            self.arch.pc = pc + 1
        elif isinstance(inst, Add):
            ready = max(t, self.avail[inst.dst], self._src_avail(inst.src)) + 1
            regs[inst.dst] = (regs[inst.dst] + self._src_value(inst.src)) & WORD_MASK
            self.avail[inst.dst] = ready
            self.arch.pc = pc + 1
        elif isinstance(inst, And):
            ready = max(t, self.avail[inst.dst], self._src_avail(inst.src)) + 1
            regs[inst.dst] &= self._src_value(inst.src)
            self.avail[inst.dst] = ready
            self.arch.pc = pc + 1
        elif isinstance(inst, Shl):
            ready = max(t, self.avail[inst.dst], self._src_avail(inst.src)) + 1
            regs[inst.dst] = (regs[inst.dst] << (self._src_value(inst.src) & 63)) & WORD_MASK
            self.avail[inst.dst] = ready
            self.arch.pc = pc + 1
        elif isinstance(inst, SelectMask):
            ready = max(t, self.avail[inst.a], self.avail[inst.b]) + 1
            regs[inst.dst] = WORD_MASK if regs[inst.a] < regs[inst.b] else 0
            self.avail[inst.dst] = ready
            self.arch.pc = pc + 1
        elif isinstance(inst, LoadByte):
            self._exec_load(inst, t)
            self.arch.pc = pc + 1
        elif isinstance(inst, Store):
            addr = (regs[inst.base] + inst.offset) & WORD_MASK
            self.seq += 1
            self.pending.append(_PendingStore(
                seq=self.seq, addr=addr, value=regs[inst.src] & 0xFF,
                addr_avail=self.avail[inst.base],
                resolve_at=max(t + 1, self.avail[inst.base], self.avail[inst.src]),
                transient=self._in_frame()))
            self.arch.pc = pc + 1
        elif isinstance(inst, Flush):
            self.uarch.cache.flush((regs[inst.base] + inst.offset) & WORD_MASK)
            self.arch.pc = pc + 1
        elif isinstance(inst, Fence):
            self._apply_ready_stores()
            self.arch.pc = pc + 1
        elif isinstance(inst, BranchLess):
            self._exec_branch(inst, t)
        elif isinstance(inst, JumpIndirect):
            self._exec_jump_indirect(inst, t)
        elif isinstance(inst, Call):
            regs[LINK_REG] = pc + 1
            self.avail[LINK_REG] = t + 1
            self.uarch.rsb.push(pc + 1)
            self._jump(self._label_index(inst.label), "call")
        elif isinstance(inst, Ret):
            self._exec_ret(inst, t)
        elif isinstance(inst, Halt):
            self._drain_stores()
            self.arch.halted = True
        else:
            raise ModelError(f"unhandled instruction {inst!r}")

    def _exec_branch(self, inst: BranchLess, t: int) -> None:
        regs = self.arch.regs
        site = self.arch.pc
        truth = regs[inst.a] < regs[inst.b]
        op_avail = max(self.avail[inst.a], self.avail[inst.b])
        taken_target = self._label_index(inst.label)
        if op_avail <= t:
            self.uarch.pht.update(site, truth)
            if truth:
                self._jump(taken_target, "branch")
            else:
                self.arch.pc = site + 1
            return
        predicted = self.uarch.pht.predict(site)
        self._open_frame(opened_by_load=False)
        self.frame.add(_Obligation("pht", ok=(predicted == truth),
                                   resolve_at=op_avail,
                                   update=("pht", site, truth)))
        if predicted:
            self._jump(taken_target, "branch")
        else:
            self.arch.pc = site + 1

    def _exec_jump_indirect(self, inst: JumpIndirect, t: int) -> None:
        site = self.arch.pc
        target = self.arch.regs[inst.reg]
        if self.avail[inst.reg] <= t:
            self.uarch.btb.update(site, target)
            self._jump(target, "indirect jump")
            return
        predicted = self.uarch.btb.predict(site)
        self._open_frame(opened_by_load=False)
        self.frame.add(_Obligation("btb", ok=(predicted == target),
                                   resolve_at=self.avail[inst.reg],
                                   update=("btb", site, target)))
        self._jump(predicted, "predicted indirect jump")

    def _exec_ret(self, inst: Ret, t: int) -> None:
        target = self.arch.regs[LINK_REG]
        predicted = self.uarch.rsb.pop()
        if self.avail[LINK_REG] <= t:
            self._jump(target, "return")
            return
        self._open_frame(opened_by_load=False)
        self.frame.add(_Obligation("rsb", ok=(predicted == target),
                                   resolve_at=self.avail[LINK_REG],
                                   update=None))
        self._jump(predicted, "predicted return")

    def _exec_load(self, inst: LoadByte, t: int) -> None:
        regs = self.arch.regs
        addr = (regs[inst.base] + regs[inst.index] * inst.scale) & WORD_MASK
        self._apply_ready_stores()
        value = None
        ready = None
        for st in reversed(self.pending):
            if st.addr_avail <= t:
                if st.addr == addr:
                    # store-to-load forwarding from the buffer
                    value = st.value
                    ready = max(t, st.resolve_at) + 1
                    break
                continue
            # older store with unresolved address: speculate no-alias
            self._open_frame(opened_by_load=True)
            self.frame.add(_Obligation("stl", ok=(st.addr != addr),
                                       resolve_at=st.addr_avail, update=None))
        if value is None:
            if not self.arch.mem.in_bounds(addr):
                if self._in_frame():
                    raise ModelError(f"transient load left the image ({addr:#x})")
                raise MemoryFault("load", addr)
            hit, latency = self.uarch.cache.access(addr)
            value = self.arch.mem.data[addr]
            ready = t + latency
        regs[inst.dst] = value
        self.avail[inst.dst] = ready

    # -- main loop ----------------------------------------------------------

    def execute(self) -> None:
        cfg = self.cfg
        while not self.arch.halted:
            self.steps += 1
            if self.steps > cfg.max_steps:
                raise ModelError("instruction budget exceeded (runaway program?)")
            fr = self.frame
            if fr is not None and (len(fr.transient) >= cfg.window
                                   or self.now >= fr.resolve_at):
                self._finish_frame()
                continue
            pc = self.arch.pc
            if not 0 <= pc < len(self.program):
                if fr is not None:
                    raise ModelError(f"transient fetch outside program (pc {pc})")
                raise ProgramFault("fetch", pc)
            inst = self.program.instructions[pc]
            need = self._issue_need(inst)
            if fr is not None and need >= fr.resolve_at:
                self._finish_frame()
                continue
            if need > self.now:
                self.uarch.cycle = need
            t = self.now
            frame_before = self.frame
            self._dispatch(inst, t)
            if self.frame is not None:
                if frame_before is not None:
                    self.frame.transient.append(pc)
                elif self.frame.opened_by_load:
                    self.frame.transient.append(pc)
            else:
                self.trace.committed.append(pc)
            self.uarch.cycle = max(self.uarch.cycle, t) + 1


def run(program: Program, arch: ArchState, uarch: MicroArchState,
        cfg: PipelineConfig | None = None, inputs=()) -> RunResult:
    """Execute a program speculatively, mutating arch and uarch in place.

    The final architectural state always equals reference_run on the same
    inputs; the microarchitectural state additionally reflects whatever
    the transient instructions touched.
    """
    cfg = cfg or PipelineConfig()
    place_inputs(arch, inputs)
    machine = _Machine(program, arch, uarch, cfg)
    start = uarch.cycle
    machine.execute()
    machine.trace.cycles = uarch.cycle - start
    return RunResult(arch, uarch, machine.trace)


def reference_run(program: Program, arch: ArchState, inputs=(),
                  max_steps: int = 1_000_000) -> ArchState:
    """Strict in-order interpreter: no speculation, no cache, no predictors.

    The oracle for architectural equivalence; shares fault behaviour with
    run() so differential tests can compare fault identities too.
    """
    place_inputs(arch, inputs)
    regs = arch.regs
    mem = arch.mem
    labels = program.labels
    steps = 0
    while not arch.halted:
        steps += 1
        if steps > max_steps:
            raise ModelError("instruction budget exceeded (runaway program?)")
        pc = arch.pc
        if not 0 <= pc < len(program):
            raise ProgramFault("fetch", pc)
        inst = program.instructions[pc]
        if isinstance(inst, MovImm):
            value = (labels[inst.value.name]
                     if isinstance(inst.value, LabelImm) else inst.value)
            regs[inst.dst] = value & WORD_MASK
        elif isinstance(inst, Add):
            src = inst.src.value if isinstance(inst.src, Imm) else regs[inst.src]
            regs[inst.dst] = (regs[inst.dst] + src) & WORD_MASK
        elif isinstance(inst, And):
            src = inst.src.value if isinstance(inst.src, Imm) else regs[inst.src]
            regs[inst.dst] &= src & WORD_MASK
        elif isinstance(inst, Shl):
            src = inst.src.value if isinstance(inst.src, Imm) else regs[inst.src]
            regs[inst.dst] = (regs[inst.dst] << (src & 63)) & WORD_MASK
        elif isinstance(inst, SelectMask):
            regs[inst.dst] = WORD_MASK if regs[inst.a] < regs[inst.b] else 0
        elif isinstance(inst, LoadByte):
            addr = (regs[inst.base] + regs[inst.index] * inst.scale) & WORD_MASK
            regs[inst.dst] = mem.read_byte(addr)
        elif isinstance(inst, Store):
            mem.write_byte((regs[inst.base] + inst.offset) & WORD_MASK,
                           regs[inst.src])
        elif isinstance(inst, BranchLess):
            if regs[inst.a] < regs[inst.b]:
                arch.pc = labels[inst.label]
                continue
        elif isinstance(inst, JumpIndirect):
            target = regs[inst.reg]
            if not 0 <= target < len(program):
                raise ProgramFault("indirect jump", target)
            arch.pc = target
            continue
        elif isinstance(inst, Call):
            regs[LINK_REG] = pc + 1
            arch.pc = labels[inst.label]
            continue
        elif isinstance(inst, Ret):
            target = regs[LINK_REG]
            if not 0 <= target < len(program):
                raise ProgramFault("return", target)
            arch.pc = target
            continue
        elif isinstance(inst, Halt):
            arch.halted = True
            continue
        # Flush and Fence are architectural no-ops
        arch.pc = pc + 1
    return arch
