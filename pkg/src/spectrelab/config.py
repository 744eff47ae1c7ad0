"""Lab configuration: one declarative bundle for every knob in the model.

Loads from a flat JSON object whose keys match the field names below;
unknown keys are rejected so typos fail loudly. Every field has a default,
so `{}` is a valid config file.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .cache import CacheConfig
from .pipeline import PipelineConfig

DEFAULT_MAGIC = 0x5350454354524521
DEFAULT_SECRET = "S3CR3T_K3Y_2024!"


class ConfigError(Exception):
    pass


@dataclass
class LabConfig:
    # cache
    cache_line: int = 64
    cache_sets: int = 64
    cache_ways: int = 8
    hit_latency: int = 40
    miss_latency: int = 300
    jitter: int = 0
    jitter_seed: int | None = None
    threshold: int = 170          # flush+reload classify threshold
    # predictors
    pht_size: int = 1024
    btb_entries: int = 256
    rsb_depth: int = 16
    # pipeline
    window: int = 64
    enable_pht: bool = True
    enable_btb: bool = True
    enable_rsb: bool = True
    enable_stl: bool = True
    store_bypass: bool = True
    # victim / experiment
    image_size: int = 4 * 1024 * 1024
    aslr_seed: int | None = None
    data_len: int = 16
    secret: str = DEFAULT_SECRET
    magic_value: int = DEFAULT_MAGIC
    training_rounds: int = 8      # mistraining inputs per exploit round
    max_rounds: int = 3           # flush+reload retries per byte
    victim_enabled: bool = True

    def validate(self) -> None:
        try:
            self.cache_config()
            self.pipeline_config()
        except Exception as exc:
            raise ConfigError(str(exc)) from exc
        if not self.hit_latency < self.threshold < self.miss_latency:
            raise ConfigError("threshold must lie strictly between hit and miss latency")
        if self.training_rounds < 1:
            raise ConfigError("training_rounds must be >= 1")
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1")
        if not 1 <= self.data_len <= 255:
            raise ConfigError("data_len must fit in one byte and be positive")
        if not 0 < len(self.secret_bytes()) <= 48 - self.data_len:
            raise ConfigError(
                "secret must be 1..%d bytes so it shares the data cache line"
                % (48 - self.data_len))
        if self.magic_value != self.magic_value & (1 << 64) - 1:
            raise ConfigError("magic_value must fit in 64 bits")

    def secret_bytes(self) -> bytes:
        return parse_byte_string(self.secret)

    def cache_config(self) -> CacheConfig:
        return CacheConfig(line_size=self.cache_line, sets=self.cache_sets,
                           ways=self.cache_ways, hit_latency=self.hit_latency,
                           miss_latency=self.miss_latency, jitter=self.jitter,
                           jitter_seed=self.jitter_seed)

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(window=self.window, pht_enabled=self.enable_pht,
                              btb_enabled=self.enable_btb,
                              rsb_enabled=self.enable_rsb,
                              stl_enabled=self.enable_stl,
                              store_bypass=self.store_bypass)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LabConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "LabConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)


def parse_byte_string(text: str) -> bytes:
    """Parse a secret/pattern argument: plain text, or 'hex:' + hex digits."""
    if text.startswith("hex:"):
        try:
            return bytes.fromhex(text[4:])
        except ValueError as exc:
            raise ConfigError(f"bad hex byte string: {exc}") from exc
    return text.encode("utf-8")
