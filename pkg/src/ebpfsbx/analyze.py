"""Loader-side static checks and information-flow classification.

A single forward dataflow pass (the CFG has forward jumps only, so no
fixpoint iteration is needed) assigns each register a provenance value at
every program point: a scalar (with optional known constant), a pointer
into the context / stack / heap / a specific map's value region, or
unknown.  Every memory access must resolve to exactly one component —
private data or a particular map — or the program is rejected.  The same
pass enforces the loader limits: instruction-count caps, no reserved
registers, no backward jumps, no unreachable code, no pointer-on-pointer
arithmetic, and no accesses through scalar or unknown bases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import Error
from .isa import (
    CLS_ALU32,
    CLS_ALU64,
    CLS_JMP,
    CLS_LDX,
    CLS_ST,
    CLS_STX,
    FRAME_REG,
    NUM_REGS,
    OP_CALL,
    OP_EXIT,
    OP_JA,
    PRIVILEGED_MAX_INSNS,
    SRC_X,
    UNPRIVILEGED_MAX_INSNS,
    ALU_OPS,
    Privilege,
)

__all__ = [
    "RejectedProgram",
    "AnalysisEnv",
    "CtxFieldDecl",
    "AccessSet",
    "check_and_analyze",
    "SCALAR",
    "CTX",
    "STACK",
    "HEAP",
    "MAPVAL",
    "UNKNOWN",
    "PRIVATE",
]

# Provenance kinds.  Values are ("scalar", const|None), ("ctx", off|None),
# ("stack", off|None), ("heap",), ("mapval", map_id), ("unknown",).
SCALAR = "scalar"
CTX = "ctx"
STACK = "stack"
HEAP = "heap"
MAPVAL = "mapval"
UNKNOWN = "unknown"

_UNK = (UNKNOWN,)
_POINTER_KINDS = frozenset({CTX, STACK, HEAP, MAPVAL})

PRIVATE = ("private",)

STACK_SIZE = 512
_MASK64 = (1 << 64) - 1

# Helper ids understood by the loader (argument typing only; availability is
# a scenario decision enforced at run time).
HELPER_MAP_LOOKUP = 1
HELPER_MAP_UPDATE = 2
HELPER_TRACE_LOG = 3
HELPER_GET_TIME = 4
HELPER_GET_PRANDOM = 5
HELPER_OBJ_POKE = 6


class RejectedProgram(Error):
    """Static rejection; `code` names the rule that fired."""

    def __init__(self, code, msg, pc=None):
        super().__init__(f"{code}: {msg}" + (f" (pc {pc})" if pc is not None else ""))
        self.code = code
        self.pc = pc


@dataclass(frozen=True)
class CtxFieldDecl:
    ctx_offset: int
    size: int
    is_reference: bool


@dataclass(frozen=True)
class AnalysisEnv:
    """Map and context declarations the loader checks accesses against."""

    map_ids: frozenset = frozenset()
    ctx_fields: tuple = ()

    def field_at(self, off, size):
        for f in self.ctx_fields:
            if off >= f.ctx_offset and off + size <= f.ctx_offset + f.size:
                return f
        return None


@dataclass
class AccessSet:
    """Classified memory accesses and the context byte ranges they touch."""

    ctx_reads: list = field(default_factory=list)
    ctx_writes: list = field(default_factory=list)
    classify: dict = field(default_factory=dict)  # pc -> PRIVATE | ("map", id)
    ctx_dynamic: bool = False

    def touched_ranges(self):
        return list(self.ctx_reads) + list(self.ctx_writes)


def _join(a, b):
    if a == b:
        return a
    if a[0] == b[0]:
        if a[0] == SCALAR:
            return (SCALAR, None)
        if a[0] in (CTX, STACK):
            return (a[0], None)
        return _UNK  # mapval with different ids
    return _UNK


def _join_state(sa, sb):
    return tuple(_join(x, y) for x, y in zip(sa, sb))


def _known(prov):
    return prov[0] == SCALAR and prov[1] is not None


_SHIFT_OPS = (ALU_OPS["lsh"], ALU_OPS["rsh"])


def _alu64_const(op, a, b):
    if op == ALU_OPS["add"]:
        return (a + b) & _MASK64
    if op == ALU_OPS["sub"]:
        return (a - b) & _MASK64
    if op == ALU_OPS["mul"]:
        return (a * b) & _MASK64
    if op == ALU_OPS["or"]:
        return (a | b) & _MASK64
    if op == ALU_OPS["and"]:
        return (a & b) & _MASK64
    if op == ALU_OPS["xor"]:
        return (a ^ b) & _MASK64
    if op == ALU_OPS["lsh"]:
        return (a << (b & 63)) & _MASK64
    if op == ALU_OPS["rsh"]:
        return (a & _MASK64) >> (b & 63)
    return None


def check_and_analyze(program, env):
    """Run the loader checks; return (provenance, AccessSet).

    `provenance` is a list with one entry per instruction: the register
    state (13-tuple of provenance values) on entry to that instruction.
    """
    n = len(program.insns)
    limit = (
        UNPRIVILEGED_MAX_INSNS
        if program.privilege == Privilege.UNPRIVILEGED
        else PRIVILEGED_MAX_INSNS
    )
    if n > limit:
        raise RejectedProgram(
            "TooManyInstructions",
            f"{n} instructions exceeds the {program.privilege.value} limit of {limit}",
        )
    if n == 0:
        raise RejectedProgram("EmptyProgram", "program has no instructions")

    for pc, ins in enumerate(program.insns):
        if any(r in (11, 12) for r in ins.regs_mentioned()):
            raise RejectedProgram(
                "ReservedRegister", "r11/r12 are reserved for instrumentation", pc
            )

    entry = [(UNKNOWN,)] * NUM_REGS
    entry[1] = (CTX, 0)
    entry[FRAME_REG] = (STACK, 0)
    incoming = [None] * (n + 1)
    incoming[0] = tuple(entry)

    provenance = [None] * n
    access = AccessSet()

    def merge_into(target, state, pc):
        if target <= pc:
            raise RejectedProgram("BackwardJump", "backward jumps are rejected", pc)
        if target >= n:
            raise RejectedProgram("OutOfBoundsJump", f"jump target {target}", pc)
        incoming[target] = (
            state if incoming[target] is None else _join_state(incoming[target], state)
        )

    def classify_access(pc, ins, base, is_write):
        kind = base[0]
        if kind in (SCALAR, UNKNOWN):
            raise RejectedProgram(
                "UnknownBaseAccess", f"memory access through {kind} base", pc
            )
        if kind == MAPVAL:
            access.classify[pc] = ("map", base[1])
            return
        access.classify[pc] = PRIVATE
        width = ins.width
        if kind == CTX:
            if base[1] is None:
                access.ctx_dynamic = True
                return
            off = base[1] + ins.off
            fdecl = env.field_at(off, width)
            if fdecl is None:
                raise RejectedProgram(
                    "CtxOutOfRange",
                    f"context access [{off},{off + width}) matches no declared field",
                    pc,
                )
            (access.ctx_writes if is_write else access.ctx_reads).append((off, width))
        elif kind == STACK:
            if base[1] is not None:
                off = base[1] + ins.off
                if off < -STACK_SIZE or off + width > 0:
                    raise RejectedProgram(
                        "StackOutOfBounds", f"stack access at frame{off:+d}", pc
                    )

    for pc in range(n):
        state = incoming[pc]
        if state is None:
            raise RejectedProgram("UnreachableCode", "instruction is unreachable", pc)
        provenance[pc] = state
        regs = list(state)
        ins = program.insns[pc]
        op = ins.opcode
        cls = op & 7
        falls_through = True

        if cls in (CLS_ALU64, CLS_ALU32):
            if ins.dst == FRAME_REG:
                raise RejectedProgram(
                    "FrameRegisterWrite", "r10 is read-only to guest code", pc
                )
            alu_op = op & 0xF0
            if op & SRC_X:
                operand = regs[ins.src]
            else:
                operand = (SCALAR, ins.imm)
            dstv = regs[ins.dst]
            if alu_op == ALU_OPS["mov"]:
                if cls == CLS_ALU64:
                    regs[ins.dst] = operand
                else:
                    c = operand[1] if operand[0] == SCALAR else None
                    regs[ins.dst] = (SCALAR, None if c is None else c & 0xFFFFFFFF)
            elif cls == CLS_ALU32:
                # 32-bit arithmetic never yields a usable pointer
                if _known(dstv) and _known(operand):
                    v = _alu64_const(alu_op, dstv[1] & 0xFFFFFFFF, operand[1] & 0xFFFFFFFF)
                    regs[ins.dst] = (SCALAR, None if v is None else v & 0xFFFFFFFF)
                else:
                    regs[ins.dst] = (SCALAR, None)
            else:
                d_ptr = dstv[0] in _POINTER_KINDS
                s_ptr = operand[0] in _POINTER_KINDS
                if alu_op in (ALU_OPS["add"], ALU_OPS["sub"]):
                    if d_ptr and s_ptr:
                        raise RejectedProgram(
                            "PointerPlusPointer",
                            "arithmetic on two pointers is rejected",
                            pc,
                        )
                    if d_ptr:
                        if dstv[0] in (CTX, STACK) and dstv[1] is not None and _known(operand):
                            delta = operand[1] if alu_op == ALU_OPS["add"] else -operand[1]
                            regs[ins.dst] = (dstv[0], dstv[1] + delta)
                        elif dstv[0] in (CTX, STACK):
                            regs[ins.dst] = (dstv[0], None)
                        # heap/mapval provenance survives; offsets are runtime-checked
                    elif s_ptr:
                        if alu_op == ALU_OPS["sub"]:
                            regs[ins.dst] = _UNK
                        elif operand[0] in (CTX, STACK) and operand[1] is not None and _known(dstv):
                            regs[ins.dst] = (operand[0], operand[1] + dstv[1])
                        elif operand[0] in (CTX, STACK):
                            regs[ins.dst] = (operand[0], None)
                        else:
                            regs[ins.dst] = operand
                    elif _known(dstv) and _known(operand):
                        regs[ins.dst] = (SCALAR, _alu64_const(alu_op, dstv[1], operand[1]))
                    elif dstv[0] == SCALAR and operand[0] == SCALAR:
                        regs[ins.dst] = (SCALAR, None)
                    else:
                        regs[ins.dst] = _UNK
                else:
                    if d_ptr or s_ptr:
                        regs[ins.dst] = _UNK
                    elif _known(dstv) and _known(operand):
                        regs[ins.dst] = (SCALAR, _alu64_const(alu_op, dstv[1], operand[1]))
                    elif dstv[0] == SCALAR and operand[0] == SCALAR:
                        regs[ins.dst] = (SCALAR, None)
                    else:
                        regs[ins.dst] = _UNK

        elif cls == CLS_LDX:
            base = regs[ins.src]
            classify_access(pc, ins, base, is_write=False)
            result = (SCALAR, None)
            if base[0] == CTX and base[1] is not None:
                off = base[1] + ins.off
                f = env.field_at(off, ins.width)
                if (
                    f is not None
                    and f.is_reference
                    and off == f.ctx_offset
                    and ins.width == 8
                ):
                    result = (HEAP,)
            regs[ins.dst] = result

        elif cls in (CLS_STX, CLS_ST):
            base = regs[ins.dst]
            classify_access(pc, ins, base, is_write=True)

        elif cls == CLS_JMP:
            if op == OP_EXIT:
                falls_through = False
            elif op == OP_JA:
                merge_into(pc + 1 + ins.off, tuple(regs), pc)
                falls_through = False
            elif op == OP_CALL:
                _check_helper_args(pc, ins.imm, regs, env)
                if ins.imm == HELPER_MAP_LOOKUP:
                    regs[0] = (MAPVAL, regs[1][1])
                else:
                    regs[0] = (SCALAR, None)
                for r in range(1, 6):
                    regs[r] = _UNK
            else:
                merge_into(pc + 1 + ins.off, tuple(regs), pc)

        if falls_through:
            if pc + 1 >= n:
                raise RejectedProgram(
                    "MissingExit", "control falls off the end of the program", pc
                )
            incoming[pc + 1] = (
                tuple(regs)
                if incoming[pc + 1] is None
                else _join_state(incoming[pc + 1], tuple(regs))
            )

    return provenance, access


def _check_helper_args(pc, helper_id, regs, env):
    if helper_id == HELPER_MAP_LOOKUP or helper_id == HELPER_MAP_UPDATE:
        if not _known(regs[1]):
            raise RejectedProgram(
                "HelperArg", "map id argument must be a known constant", pc
            )
        if regs[1][1] not in env.map_ids:
            raise RejectedProgram(
                "HelperArg", f"map id {regs[1][1]} is not declared", pc
            )
        if helper_id == HELPER_MAP_UPDATE and regs[3][0] not in _POINTER_KINDS:
            raise RejectedProgram(
                "HelperArg", "map update value argument must be a pointer", pc
            )
    elif helper_id == HELPER_TRACE_LOG:
        if regs[1][0] not in _POINTER_KINDS:
            raise RejectedProgram(
                "HelperArg", "trace source argument must be a pointer", pc
            )
    elif helper_id == HELPER_OBJ_POKE:
        if regs[1][0] not in _POINTER_KINDS:
            raise RejectedProgram(
                "HelperArg", "object argument must be a pointer", pc
            )
    # unknown helper ids fault at run time, not load time
