"""Flush+Reload receiver against a simulated victim.

Protocol, in the order the operations must run:

1. scan_for_magic: read the victim image for pages filled end to end with
   the 8-byte magic word (the victim allocated and filled them).
2. establish_shared: alias each magic page onto the receiver's probe
   frames (the lookup pages) in the cache address space, the lab analog
   of rewriting page frame numbers. The receiver never writes victim
   memory; aliasing changes cache addressing only.
3. flush_reload_round: evict one probe line per frame (page offset 0),
   step the victim once, then time a reload of each frame, flushing it
   again right after the measurement so probes never evict each other.
   Exactly one warm frame decodes to a byte; zero means the victim kept
   quiet; more than one is ambiguous and the round is retried.
4. recover_secret / covert_channel_test drive rounds per the schedule.

The receiver's clock is the cache latency itself; `classify` applies the
configured threshold.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

from .cache import classify
from .config import LabConfig
from .gadgets import (Gadget, GadgetSpec, VictimSession, build_covert_sender,
                      build_gadget, standard_layout)
from .isa import Program
from .memory import MemoryImage, PAGE_SIZE

CHANNEL_PAGES = 256


class ProtocolError(Exception):
    pass


def scan_for_magic(memory: MemoryImage, magic: int) -> list[int]:
    """Page ids whose every aligned 8-byte word equals the magic value.

    Raises ProtocolError when fewer than 256 qualify: the victim has not
    set up (or not finished setting up) its channel region.
    """
    magic_blob = (magic & (1 << 64) - 1).to_bytes(8, "little") * (PAGE_SIZE // 8)
    found = [page for page in range(memory.pages)
             if memory.data[page * PAGE_SIZE:(page + 1) * PAGE_SIZE] == magic_blob]
    if len(found) < CHANNEL_PAGES:
        raise ProtocolError(
            f"magic region incomplete: found {len(found)} pages, need {CHANNEL_PAGES}")
    return found


@dataclass(frozen=True)
class SharedMapping:
    """Bijection between victim magic pages and receiver probe frames."""
    pairs: tuple  # (victim page id, frame id) in frame order

    def victim_pages(self) -> list[int]:
        return [v for v, _ in self.pairs]


@dataclass
class RoundResult:
    byte: int | None
    ambiguous: bool
    hot_pages: list[int]


@dataclass
class LeakReport:
    recovered: list            # int byte or None per position
    statuses: list             # "recovered" | "ambiguous" | "none"
    rounds_used: list
    config: dict

    @property
    def text(self) -> str:
        return "".join(chr(b) if b is not None and 32 <= b < 127 else "."
                       for b in self.recovered)

    @property
    def bytes_recovered(self) -> int:
        return sum(1 for s in self.statuses if s == "recovered")

    @property
    def complete(self) -> bool:
        return bool(self.statuses) and all(s == "recovered" for s in self.statuses)

    def to_dict(self) -> dict:
        return {
            "recovered": list(self.recovered),
            "text": self.text,
            "statuses": list(self.statuses),
            "rounds_used": list(self.rounds_used),
            "bytes_recovered": self.bytes_recovered,
            "complete": self.complete,
            "config": dict(self.config),
        }


@dataclass
class CovertResult:
    reconstructed: list
    exact: bool

    def to_dict(self) -> dict:
        return {"reconstructed": list(self.reconstructed), "exact": self.exact}


@dataclass(frozen=True)
class Schedule:
    training_rounds: int = 8
    max_rounds: int = 3


class Receiver:
    """Receiver bound to one victim session."""

    def __init__(self, session: VictimSession):
        self.session = session
        self.config = session.config
        self.layout = session.layout
        self.cache = session.uarch.cache
        self.mapping: SharedMapping | None = None

    # -- protocol steps ---------------------------------------------------

    def scan_for_magic(self) -> list[int]:
        return scan_for_magic(self.session.memory, self.config.magic_value)

    def establish_shared(self, pages: list[int] | None = None) -> SharedMapping:
        """Alias the victim's magic pages onto the probe frames; idempotent."""
        if pages is None:
            pages = self.scan_for_magic()
        if len(pages) != CHANNEL_PAGES:
            raise ProtocolError(
                f"need exactly {CHANNEL_PAGES} pages to share, got {len(pages)}")
        frame_pages = [self.layout.lookup_base // PAGE_SIZE + i
                       for i in range(CHANNEL_PAGES)]
        for victim_page, frame_page in zip(sorted(pages), frame_pages):
            self.cache.aliases.alias(victim_page, frame_page)
        self.mapping = SharedMapping(
            pairs=tuple(zip(sorted(pages), range(CHANNEL_PAGES))))
        return self.mapping

    def _frame_addr(self, frame: int) -> int:
        return self.layout.lookup_base + frame * PAGE_SIZE

    def flush_reload_round(self, run_victim: Callable[[], object]) -> RoundResult:
        """One receive slot: flush every frame, let the victim run once,
        reload each frame and classify; re-flush after each measurement."""
        if self.mapping is None:
            raise ProtocolError("shared mapping not established")
        cache_cfg = self.cache.config
        threshold = self.config.threshold
        for frame in range(CHANNEL_PAGES):
            self.cache.flush(self._frame_addr(frame))
        run_victim()
        hot = []
        for frame in range(CHANNEL_PAGES):
            addr = self._frame_addr(frame)
            _, latency = self.cache.access(addr)
            if classify(latency, threshold, cache_cfg):
                hot.append(frame)
            self.cache.flush(addr)
        if len(hot) == 1:
            return RoundResult(byte=hot[0], ambiguous=False, hot_pages=hot)
        return RoundResult(byte=None, ambiguous=len(hot) > 1, hot_pages=hot)

    # -- recovery ---------------------------------------------------------

    def recover_secret(self, n: int | None = None,
                       schedule: Schedule | None = None) -> LeakReport:
        """Leak n secret bytes: per byte, mistrain, evict the victim's
        slow-resolve line, feed the out-of-bounds input inside one
        flush+reload round, retrying ambiguous or empty rounds."""
        if self.mapping is None:
            raise ProtocolError("shared mapping not established")
        gadget = self.session.gadget
        if n is None:
            n = self.layout.secret_len
        if schedule is None:
            schedule = Schedule(training_rounds=self.config.training_rounds,
                                max_rounds=self.config.max_rounds)
        recovered, statuses, rounds_used = [], [], []
        for i in range(n):
            byte, status, used = None, "none", 0
            for _ in range(schedule.max_rounds):
                used += 1
                if gadget.needs_training:
                    for r in range(schedule.training_rounds):
                        self.session.step(gadget.training_input(r))
                if gadget.flush_addr is not None:
                    self.cache.flush(gadget.flush_addr)
                result = self.flush_reload_round(
                    lambda: self.session.step(gadget.exploit_input(i)))
                if result.byte is not None:
                    byte = result.byte + gadget.decode_shift
                    status = "recovered"
                    break
                status = "ambiguous" if result.ambiguous else "none"
            recovered.append(byte)
            statuses.append(status)
            rounds_used.append(used)
        return LeakReport(recovered=recovered, statuses=statuses,
                          rounds_used=rounds_used, config=self.config.to_dict())

    def run_covert(self, pattern: bytes) -> CovertResult:
        """Reconstruct a sender pattern, one byte per flush+reload round."""
        if self.mapping is None:
            raise ProtocolError("shared mapping not established")
        out = []
        for _ in range(len(pattern)):
            result = self.flush_reload_round(lambda: self.session.step(0))
            out.append(result.byte)
        exact = out == list(pattern)
        return CovertResult(reconstructed=out, exact=exact)


# -- session wiring -----------------------------------------------------------


def leak_session(config: LabConfig, variant: str,
                 program: Program | None = None,
                 gadget: Gadget | None = None) -> tuple[VictimSession, Receiver]:
    """Build a victim for the variant, connect a receiver, and establish
    the shared mapping. `program` substitutes a transformed victim."""
    if gadget is None:
        layout = standard_layout(config.image_size, config.aslr_seed,
                                 data_len=config.data_len,
                                 secret_len=len(config.secret_bytes()))
        gadget = build_gadget(variant, GadgetSpec(
            variant=variant, layout=layout,
            training_rounds=config.training_rounds))
    session = VictimSession(gadget, config, program=program)
    receiver = Receiver(session)
    receiver.establish_shared()
    return session, receiver


def covert_channel_test(pattern: bytes, config: LabConfig) -> CovertResult:
    """Phase one of the methodology: can the channel carry a known
    pattern at all? Empty patterns reconstruct trivially."""
    if len(pattern) == 0:
        return CovertResult(reconstructed=[], exact=True)
    layout = standard_layout(config.image_size, config.aslr_seed,
                             data_len=config.data_len,
                             secret_len=len(config.secret_bytes()))
    sender = build_covert_sender(pattern, layout)
    session = VictimSession(sender, config)
    receiver = Receiver(session)
    receiver.establish_shared()
    return receiver.run_covert(pattern)


@dataclass
class SweepResult:
    leaks: list          # (window, leaked) pairs
    threshold: int | None

    @property
    def monotone(self) -> bool:
        flags = [leaked for _, leaked in self.leaks]
        return all(not earlier or later
                   for earlier, later in zip(flags, flags[1:]))


def window_sweep(config: LabConfig, max_window: int = 64,
                 variant: str = "pht") -> SweepResult:
    """Leak one byte at every speculation window in [0, max_window] and
    report the smallest window that leaks."""
    secret = config.secret_bytes()
    leaks = []
    threshold = None
    for window in range(max_window + 1):
        cfg = replace(config, window=window)
        _, receiver = leak_session(cfg, variant)
        report = receiver.recover_secret(n=1, schedule=Schedule(
            training_rounds=cfg.training_rounds, max_rounds=1))
        leaked = report.recovered[0] == secret[0]
        leaks.append((window, leaked))
        if leaked and threshold is None:
            threshold = window
    return SweepResult(leaks=leaks, threshold=threshold)
