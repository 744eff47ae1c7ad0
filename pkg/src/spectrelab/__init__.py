"""Deterministic transient-execution laboratory.

A minimal speculative pipeline whose mispredictions leave cache footprints,
victim gadgets that encode secrets into those footprints, mitigation
passes, and a Flush+Reload receiver that recovers the secrets.
"""

__version__ = "0.1.0"

from .cache import Cache, CacheConfig, classify
from .config import ConfigError, LabConfig
from .gadgets import (Gadget, GadgetSpec, VictimSession, build_btb_gadget,
                      build_covert_sender, build_gadget,
                      build_pht_index_gadget, build_rsb_gadget,
                      build_stl_gadget, standard_layout, VARIANTS)
from .isa import AsmError, Program, assemble, disassemble
from .memory import (LayoutError, MemoryFault, MemoryImage, MemoryLayout,
                     ModelError, PAGE_SIZE, validate_layout)
from .mitigations import (MatrixReport, PatternNotFound, apply, evaluate,
                          expected_leak, full_matrix, KINDS)
from .pipeline import (ArchState, ExecutionTrace, MicroArchState,
                       PipelineConfig, ProgramFault, reference_run, run)
from .predictors import Btb, Pht, Rsb, StoreBypassPolicy
from .receiver import (LeakReport, ProtocolError, Receiver, Schedule,
                       covert_channel_test, leak_session, scan_for_magic,
                       window_sweep)

__all__ = [name for name in dir() if not name.startswith("_")]
