"""Mask computation and SFI binary rewriting.

Address masking forces every effective address into a power-of-two region:
an AND with `and_mask` clears the upper bits, then an OR with `or_mask`
relocates the result into the region.  The rewriter prepends a masking
sequence to every classified load/store and redirects the access through
the reserved scratch register r11:

    mov64 r11, <base>      ; address formation
    add64 r11, <offset>    ; address formation
    and64 r11, <and_mask>  ; access check
    or64  r11, <or_mask>   ; access check
    <access via [r11+0]>

An or_mask that does not fit a signed 32-bit immediate is materialized into
r12 first (shift/add, marked as address formation) and the OR uses the
register form.  Tag-checking modes need none of this; programs pass through
unrewritten.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import Error
from . import isa
from .isa import (
    ALU_OPS,
    CLS_ALU64,
    CLS_LDX,
    CLS_ST,
    CLS_STX,
    OP_EXIT,
    OP_JA,
    CLS_JMP,
    OP_CALL,
    SRC_K,
    SRC_X,
    Instruction,
    Origin,
)

__all__ = [
    "MaskPair",
    "compute_masks",
    "mask_address",
    "rewrite_sfi",
    "splice",
    "RewriteReport",
    "NotPowerOfTwo",
    "MisalignedBase",
    "JumpFixupOverflow",
]

_MASK64 = (1 << 64) - 1
_IMM_MAX = (1 << 31) - 1
_IMM_MIN = -(1 << 31)

PRIVATE = ("private",)


class NotPowerOfTwo(Error):
    pass


class MisalignedBase(Error):
    pass


class JumpFixupOverflow(Error):
    pass


@dataclass(frozen=True)
class MaskPair:
    and_mask: int
    or_mask: int

    def __post_init__(self):
        if self.or_mask & self.and_mask:
            raise ValueError("or_mask and and_mask overlap")
        size = self.and_mask + 1
        if size & (size - 1):
            raise ValueError("and_mask+1 must be a power of two")
        if self.or_mask % size:
            raise ValueError("or_mask must be aligned to the region size")


def compute_masks(base, size):
    """Mask pair for a power-of-two region of `size` bytes at `base`."""
    if size < 16 or size & (size - 1):
        raise NotPowerOfTwo(f"region size {size} is not a power of two >= 16")
    if base % size:
        raise MisalignedBase(f"base 0x{base:x} is not {size}-aligned")
    return MaskPair(and_mask=size - 1, or_mask=base)


def mask_address(addr, pair):
    """Total on all 64-bit inputs; the result always lands in the region."""
    return ((addr & pair.and_mask) | pair.or_mask) & _MASK64


# ---------------------------------------------------------------------------
# Generic instruction splicing with jump fixup
# ---------------------------------------------------------------------------


def splice(program, inserts, rewrites=None):
    """Insert instruction blocks before selected positions, re-fixing jumps.

    `inserts` maps an original instruction index (0..len, where len means
    "at the very end") to a list of (Instruction, Origin) pairs.  `rewrites`
    optionally replaces the original instruction at an index.  A jump whose
    target position gained an inserted block lands at the start of that
    block.  Returns (program', old_to_new) where old_to_new maps original
    indices to block-start indices in the new stream.
    """
    n = len(program.insns)
    rewrites = rewrites or {}
    block_start = [0] * (n + 1)
    pos = 0
    for i in range(n + 1):
        block_start[i] = pos
        pos += len(inserts.get(i, ()))
        if i < n:
            pos += 1

    out = []
    origins = []
    for i, ins in enumerate(program.insns):
        for new_ins, origin in inserts.get(i, ()):
            out.append(new_ins)
            origins.append(origin)
        body = rewrites.get(i, ins)
        if body.cls == CLS_JMP and body.opcode not in (OP_CALL, OP_EXIT):
            target = i + 1 + body.off
            if not 0 <= target <= n:
                raise Error(f"jump at {i} targets out-of-range index {target}")
            my_pos = block_start[i] + len(inserts.get(i, ()))
            new_off = block_start[target] - (my_pos + 1)
            if not -(1 << 15) <= new_off < (1 << 15):
                raise JumpFixupOverflow(
                    f"jump at {i} needs offset {new_off} after insertion"
                )
            body = isa.replace_insn(body, off=new_off)
        out.append(body)
        origins.append(program.origins[i])
    for new_ins, origin in inserts.get(n, ()):
        out.append(new_ins)
        origins.append(origin)

    return isa.with_insns(program, out, origins), dict(
        (i, block_start[i]) for i in range(n + 1)
    )


# ---------------------------------------------------------------------------
# SFI rewriting
# ---------------------------------------------------------------------------

_OP_MOV64_K = ALU_OPS["mov"] | CLS_ALU64 | SRC_K
_OP_MOV64_X = ALU_OPS["mov"] | CLS_ALU64 | SRC_X
_OP_ADD64_K = ALU_OPS["add"] | CLS_ALU64 | SRC_K
_OP_AND64_K = ALU_OPS["and"] | CLS_ALU64 | SRC_K
_OP_OR64_K = ALU_OPS["or"] | CLS_ALU64 | SRC_K
_OP_OR64_X = ALU_OPS["or"] | CLS_ALU64 | SRC_X
_OP_LSH64_K = ALU_OPS["lsh"] | CLS_ALU64 | SRC_K

_R11, _R12 = 11, 12


@dataclass
class RewriteReport:
    guarded_accesses: int
    inserted_by_category: dict
    guarded_pcs: dict  # new pc of each guarded access -> component key

    def to_json(self):
        return {
            "guarded_accesses": self.guarded_accesses,
            "inserted_by_category": dict(self.inserted_by_category),
        }


def _materialize_imm64(reg, value):
    """Build a 64-bit constant in `reg` with mov/lsh/add (address formation).

    The add's immediate is sign-extended at execution; a set sign bit in the
    low half is compensated by bumping the high half.
    """
    lo = value & 0xFFFFFFFF
    hi = (value >> 32) & 0xFFFFFFFF
    if lo & 0x80000000:
        hi = (hi + 1) & 0xFFFFFFFF
        lo -= 1 << 32
    if hi & 0x80000000:
        hi -= 1 << 32
    return [
        (Instruction(_OP_MOV64_K, dst=reg, imm=hi), Origin.ADDRESS_FORM),
        (Instruction(_OP_LSH64_K, dst=reg, imm=32), Origin.ADDRESS_FORM),
        (Instruction(_OP_ADD64_K, dst=reg, imm=lo), Origin.ADDRESS_FORM),
    ]


def _mask_sequence(base_reg, offset, pair):
    seq = [
        (Instruction(_OP_MOV64_X, dst=_R11, src=base_reg), Origin.ADDRESS_FORM),
        (Instruction(_OP_ADD64_K, dst=_R11, imm=offset), Origin.ADDRESS_FORM),
    ]
    if not _IMM_MIN <= pair.and_mask <= _IMM_MAX:
        raise Error(f"and_mask 0x{pair.and_mask:x} exceeds a 32-bit immediate")
    seq.append((Instruction(_OP_AND64_K, dst=_R11, imm=pair.and_mask), Origin.ACCESS_CHECK))
    if 0 <= pair.or_mask <= _IMM_MAX:
        seq.append((Instruction(_OP_OR64_K, dst=_R11, imm=pair.or_mask), Origin.ACCESS_CHECK))
    else:
        seq.extend(_materialize_imm64(_R12, pair.or_mask))
        seq.append((Instruction(_OP_OR64_X, dst=_R11, src=_R12), Origin.ACCESS_CHECK))
    return seq


def rewrite_sfi(program, provenance, access_set, components):
    """Guard every classified load/store with its component's mask pair.

    `components` maps a component key — ("private",) or ("map", id) — to a
    MaskPair.  Original instruction count and relative order are preserved;
    jump offsets are re-fixed; prologue/epilogue markers bracket the body.
    Returns (rewritten Program, RewriteReport).
    """
    del provenance  # classification already carries everything the rewriter needs
    inserts = {}
    rewrites = {}
    guarded = {}
    n = len(program.insns)

    prologue = [(Instruction(_OP_MOV64_K, dst=_R11, imm=0), Origin.SANDBOX)]
    inserts[0] = list(prologue)

    for pc, ins in enumerate(program.insns):
        if ins.cls == CLS_JMP or not ins.is_mem():
            if ins.opcode == OP_EXIT:
                inserts.setdefault(pc, []).append(
                    (Instruction(_OP_MOV64_K, dst=_R11, imm=0), Origin.SANDBOX)
                )
            continue
        component = access_set.classify.get(pc)
        if component is None:
            raise Error(f"unclassified memory access at pc {pc}")
        pair = components.get(component)
        if pair is None:
            raise Error(f"no mask registered for component {component}")
        base_reg = ins.src if ins.cls == CLS_LDX else ins.dst
        seq = _mask_sequence(base_reg, ins.off, pair)
        inserts.setdefault(pc, []).extend(seq)
        if ins.cls == CLS_LDX:
            rewrites[pc] = isa.replace_insn(ins, src=_R11, off=0)
        else:
            rewrites[pc] = isa.replace_insn(ins, dst=_R11, off=0)
        guarded[pc] = component

    rewritten, old_to_new = splice(program, inserts, rewrites)
    guarded_new = {}
    for pc, component in guarded.items():
        guarded_new[old_to_new[pc] + len(inserts.get(pc, ()))] = component

    counts = rewritten.inserted_counts()
    return rewritten, RewriteReport(
        guarded_accesses=len(guarded),
        inserted_by_category=counts,
        guarded_pcs=guarded_new,
    )
