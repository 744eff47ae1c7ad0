"""Command-line entry point.

Exit codes are the machine contract: 0 means success (or the expected
experimental outcome), 1 means the experiment came back negative
(partial or no leak, matrix mismatch, inexact covert reconstruction),
2 means a usage or configuration error.

Reports are wrapped in an envelope {tool, version, kind, timestamp,
config, payload}; the timestamp is the only non-deterministic field, so
golden comparisons should target the payload.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone

from . import __version__
from .config import ConfigError, LabConfig, parse_byte_string
from .gadgets import GadgetSpec, VARIANTS, build_gadget, standard_layout
from .isa import assemble
from .mitigations import (TransformError, apply_with_report, full_matrix,
                          KINDS)
from .receiver import covert_channel_test, leak_session

_MITIGATION_ALIASES = {
    "fence": "fence_after_branch",
    "mask": "index_mask",
    "rsb": "rsb_stuff",
}


def _parse_mitigations(values) -> tuple:
    kinds = []
    for value in values or []:
        for name in value.split(","):
            name = name.strip()
            if not name or name == "none":
                continue
            name = _MITIGATION_ALIASES.get(name, name)
            if name not in KINDS:
                raise ConfigError(
                    f"unknown mitigation {name!r}; choose from {', '.join(KINDS)}")
            if name not in kinds:
                kinds.append(name)
    return tuple(sorted(kinds))


def _load_config(args) -> LabConfig:
    config = (LabConfig.from_file(args.config) if getattr(args, "config", None)
              else LabConfig())
    if getattr(args, "secret", None):
        config = replace(config, secret=args.secret)
    if getattr(args, "window", None) is not None:
        config = replace(config, window=args.window)
    if getattr(args, "aslr_seed", None) is not None:
        config = replace(config, aslr_seed=args.aslr_seed)
    config.validate()
    return config


def _emit(kind: str, payload: dict, config: LabConfig, out: str | None) -> None:
    envelope = {
        "tool": "spectrelab",
        "version": __version__,
        "kind": kind,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "config": config.to_dict(),
        "payload": payload,
    }
    text = json.dumps(envelope, indent=2, sort_keys=True) + "\n"
    _write(text, out)


def _write(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_leak(args) -> int:
    config = _load_config(args)
    kinds = _parse_mitigations(args.mitigation)
    layout = standard_layout(config.image_size, config.aslr_seed,
                             data_len=config.data_len,
                             secret_len=len(config.secret_bytes()))
    gadget = build_gadget(args.variant, GadgetSpec(
        variant=args.variant, layout=layout,
        training_rounds=config.training_rounds))
    program, applied = apply_with_report(kinds, gadget.program)
    run_config = replace(config, store_bypass=config.store_bypass
                         and "ssbd" not in kinds)
    session, receiver = leak_session(run_config, args.variant,
                                     program=program, gadget=gadget)
    report = receiver.recover_secret()
    secret = config.secret_bytes()
    payload = report.to_dict()
    payload["variant"] = args.variant
    payload["mitigations"] = list(kinds)
    payload["applied"] = applied
    payload["matches_secret"] = (report.complete
                                 and bytes(report.recovered) == secret)
    payload["transient_count"] = session.stats.transient_total
    _emit("leak", payload, config, args.out)
    return 0 if report.complete else 1


def cmd_matrix(args) -> int:
    config = _load_config(args)
    report = full_matrix(config)
    if args.format == "csv":
        _write(report.to_csv(), args.out)
    else:
        _emit("matrix", report.to_dict(), config, args.out)
    return 0 if report.matches_expected() else 1


def cmd_covert(args) -> int:
    config = _load_config(args)
    pattern = parse_byte_string(args.pattern)
    if len(pattern) > 256:
        raise ConfigError("pattern may hold at most 256 bytes")
    result = covert_channel_test(pattern, config)
    payload = result.to_dict()
    payload["pattern_length"] = len(pattern)
    _emit("covert", payload, config, args.out)
    return 0 if result.exact else 1


def cmd_trace(args) -> int:
    config = _load_config(args)
    session, receiver = leak_session(config, args.variant)
    gadget = session.gadget
    if gadget.needs_training:
        for r in range(config.training_rounds):
            session.step(gadget.training_input(r))
    trace = session.step(gadget.exploit_input(0))
    payload = trace.to_dict() if trace is not None else {"victim_disabled": True}
    _emit("trace", payload, config, args.out)
    return 0


def cmd_dump_gadget(args) -> int:
    config = _load_config(args)
    layout = standard_layout(config.image_size, config.aslr_seed,
                             data_len=config.data_len,
                             secret_len=len(config.secret_bytes()))
    gadget = build_gadget(args.variant, GadgetSpec(
        variant=args.variant, layout=layout,
        training_rounds=config.training_rounds))
    text = gadget.asm()
    assemble(text)   # self-check: dumps must assemble cleanly
    _write(text, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spectrelab",
        description="Deterministic transient-execution laboratory")

    def common(p, variant=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="write the report here instead of stdout")
        p.add_argument("--window", type=int, help="override speculation window")
        p.add_argument("--aslr-seed", type=int, dest="aslr_seed",
                       help="override the layout randomisation seed")
        if variant:
            p.add_argument("--variant", required=True, choices=VARIANTS)

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("leak", help="recover the configured secret")
    common(p, variant=True)
    p.add_argument("--secret", help="secret to plant (text or hex:...)")
    p.add_argument("--mitigation", action="append", default=[],
                   help="mitigation kind(s); repeat or comma-separate")
    p.set_defaults(func=cmd_leak)

    p = sub.add_parser("matrix", help="variant x mitigation effectiveness matrix")
    common(p)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("covert", help="covert channel pattern reconstruction")
    common(p)
    p.add_argument("--pattern", required=True,
                   help="pattern to send (text or hex:...)")
    p.set_defaults(func=cmd_covert)

    p = sub.add_parser("trace", help="dump one exploit-round execution trace")
    common(p, variant=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("dump-gadget", help="print a victim program as assembly")
    common(p, variant=True)
    p.set_defaults(func=cmd_dump_gadget)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, TransformError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
