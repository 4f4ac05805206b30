"""User-space sandbox runtime for eBPF-style bytecode.

Programs are assembled or decoded, statically vetted (instruction limits,
register provenance, access classification), then executed inside a
per-core sandbox page under one of four modes: an unenforced baseline,
software fault isolation by address masking, synchronous memory-tag
checking, or a tag-only variant that skips context copying.  Harnesses
reproduce the fault-injection and cost-breakdown evaluations.
"""

from .analyze import AccessSet, AnalysisEnv, RejectedProgram, check_and_analyze
from .engine import RunResult, prepare_and_run, run
from .errors import Error, GuestFault
from .harness import builtin_scenario, builtin_scenarios, inject_faults, run_microbench
from .instrument import MaskPair, compute_masks, mask_address, rewrite_sfi
from .isa import Instruction, Program, assemble, decode, disassemble, encode
from .memory import SimAddressSpace, TagPolicy
from .sandbox import Mode, SandboxPool
from .scenario import World, load_scenario, parse_scenario

__version__ = "0.1.0"

__all__ = [
    "AccessSet",
    "AnalysisEnv",
    "Error",
    "GuestFault",
    "Instruction",
    "MaskPair",
    "Mode",
    "Program",
    "RejectedProgram",
    "RunResult",
    "SandboxPool",
    "SimAddressSpace",
    "TagPolicy",
    "World",
    "assemble",
    "builtin_scenario",
    "builtin_scenarios",
    "check_and_analyze",
    "compute_masks",
    "decode",
    "disassemble",
    "encode",
    "inject_faults",
    "load_scenario",
    "mask_address",
    "parse_scenario",
    "prepare_and_run",
    "rewrite_sfi",
    "run",
    "run_microbench",
    "__version__",
]
