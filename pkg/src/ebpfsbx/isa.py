"""Instruction set, program container, text assembler/disassembler, binary codec.

The instruction set is the classic fixed-width eBPF subset: 64/32-bit ALU
arithmetic and moves, sized loads and stores, forward-friendly conditional
jumps, helper calls, and exit.  Each instruction occupies 8 bytes on the
wire:

    byte 0     opcode
    byte 1     dst register in the low nibble, src register in the high nibble
    bytes 2-3  little-endian signed 16-bit offset
    bytes 4-7  little-endian signed 32-bit immediate

Wide (16-byte) load-immediate forms are deliberately excluded; 64-bit
constants are built with shifts and adds.  Registers r0-r10 are the guest
architectural file (r10 is the frame register and is read-only to guest
code); r11 and r12 are reserved as instrumentation scratch and may not
appear in a pre-instrumentation program.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum

from .errors import Error

__all__ = [
    "Instruction",
    "Program",
    "Privilege",
    "Origin",
    "AssemblyError",
    "DecodeError",
    "assemble",
    "disassemble",
    "encode",
    "decode",
]

NUM_REGS = 13  # r0..r10 architectural, r11/r12 instrumentation scratch
FRAME_REG = 10
RESERVED_REGS = (11, 12)

UNPRIVILEGED_MAX_INSNS = 4096
PRIVILEGED_MAX_INSNS = 1_000_000

# Instruction classes (low 3 bits of the opcode).
CLS_LDX = 0x01
CLS_ST = 0x02
CLS_STX = 0x03
CLS_ALU32 = 0x04
CLS_JMP = 0x05
CLS_ALU64 = 0x07

# Memory access mode/size bits.
MODE_MEM = 0x60
SIZE_W = 0x00
SIZE_H = 0x08
SIZE_B = 0x10
SIZE_DW = 0x18
SIZE_TO_BYTES = {SIZE_W: 4, SIZE_H: 2, SIZE_B: 1, SIZE_DW: 8}
BYTES_TO_SIZE = {v: k for k, v in SIZE_TO_BYTES.items()}

# ALU / JMP operation bits (high nibble) and the source-operand bit.
SRC_K = 0x00  # operand is the immediate
SRC_X = 0x08  # operand is a register

ALU_OPS = {
    "add": 0x00,
    "sub": 0x10,
    "mul": 0x20,
    "or": 0x40,
    "and": 0x50,
    "lsh": 0x60,
    "rsh": 0x70,
    "xor": 0xA0,
    "mov": 0xB0,
}
JMP_OPS = {"jeq": 0x10, "jgt": 0x20, "jlt": 0xA0, "jne": 0x50}
OP_JA = 0x05  # JMP | JA | K
OP_CALL = 0x85
OP_EXIT = 0x95

_WIDTH_SUFFIX = {"b": 1, "h": 2, "w": 4, "dw": 8}
_SUFFIX_BY_WIDTH = {v: k for k, v in _WIDTH_SUFFIX.items()}


class Privilege(str, Enum):
    UNPRIVILEGED = "unprivileged"
    PRIVILEGED = "privileged"


class Origin(IntEnum):
    """Provenance marker for each instruction of a (possibly rewritten) program."""

    ORIGINAL = 0
    ACCESS_CHECK = 1  # the and/or masking pair
    ADDRESS_FORM = 2  # effective-address and mask-constant formation
    SANDBOX = 3  # prologue/epilogue markers


class AssemblyError(Error):
    def __init__(self, msg, line=None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


class DecodeError(Error):
    pass


def _check_reg(r):
    if not 0 <= r < NUM_REGS:
        raise ValueError(f"register index out of range: {r}")


@dataclass(frozen=True)
class Instruction:
    """One fixed-width instruction."""

    opcode: int
    dst: int = 0
    src: int = 0
    off: int = 0
    imm: int = 0

    def __post_init__(self):
        _check_reg(self.dst)
        _check_reg(self.src)
        if not -(1 << 15) <= self.off < (1 << 15):
            raise ValueError(f"offset out of range: {self.off}")
        if not -(1 << 31) <= self.imm < (1 << 31):
            raise ValueError(f"immediate out of range: {self.imm}")

    @property
    def cls(self):
        return self.opcode & 0x07

    def is_load(self):
        return self.cls == CLS_LDX

    def is_store(self):
        return self.cls in (CLS_ST, CLS_STX)

    def is_mem(self):
        return self.cls in (CLS_LDX, CLS_ST, CLS_STX)

    @property
    def width(self):
        """Access width in bytes for memory instructions."""
        return SIZE_TO_BYTES[self.opcode & 0x18]

    def regs_mentioned(self):
        regs = set()
        c = self.cls
        if c in (CLS_ALU32, CLS_ALU64):
            regs.add(self.dst)
            if self.opcode & SRC_X:
                regs.add(self.src)
        elif c == CLS_LDX:
            regs.update((self.dst, self.src))
        elif c == CLS_STX:
            regs.update((self.dst, self.src))
        elif c == CLS_ST:
            regs.add(self.dst)
        elif c == CLS_JMP:
            if self.opcode not in (OP_JA, OP_CALL, OP_EXIT):
                regs.add(self.dst)
                if self.opcode & SRC_X:
                    regs.add(self.src)
        return regs


@dataclass
class Program:
    """A sequence of instructions plus load-time metadata.

    `origins` runs parallel to `insns`: every instruction is either part of
    the original program or was inserted by the rewriter under a named
    category.  Freshly assembled or decoded programs are all-original.
    """

    insns: tuple = ()
    privilege: Privilege = Privilege.UNPRIVILEGED
    context_type: str = ""
    origins: tuple = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.insns = tuple(self.insns)
        if self.origins is None:
            self.origins = tuple(Origin.ORIGINAL for _ in self.insns)
        else:
            self.origins = tuple(Origin(o) for o in self.origins)
        if len(self.origins) != len(self.insns):
            raise ValueError("origins must parallel instructions")

    def __len__(self):
        return len(self.insns)

    def original_count(self):
        return sum(1 for o in self.origins if o == Origin.ORIGINAL)

    def inserted_counts(self):
        counts = {}
        for o in self.origins:
            if o != Origin.ORIGINAL:
                counts[o.name] = counts.get(o.name, 0) + 1
        return counts

    def mentions_reserved_regs(self):
        return any(
            r in RESERVED_REGS for ins in self.insns for r in ins.regs_mentioned()
        )


# ---------------------------------------------------------------------------
# Assembler
# ---------------------------------------------------------------------------

_REG_RE = re.compile(r"^r(\d{1,2})$")
_MEM_RE = re.compile(r"^\[\s*(r\d{1,2})\s*([+-]\s*(?:0x[0-9a-fA-F]+|\d+))?\s*\]$")
_JOFF_RE = re.compile(r"^[+-](?:0x[0-9a-fA-F]+|\d+)$")


def _parse_int(text, line):
    t = text.replace(" ", "")
    try:
        return int(t, 0)
    except ValueError:
        raise AssemblyError(f"bad integer {text!r}", line) from None


def _parse_reg(tok, line, allow_reserved):
    m = _REG_RE.match(tok)
    if not m:
        raise AssemblyError(f"expected register, got {tok!r}", line)
    r = int(m.group(1))
    if r >= NUM_REGS:
        raise AssemblyError(f"register out of range: {tok}", line)
    if r in RESERVED_REGS and not allow_reserved:
        raise AssemblyError(f"r{r} is reserved for instrumentation", line)
    return r


def _parse_mem(tok, line, allow_reserved):
    m = _MEM_RE.match(tok)
    if not m:
        raise AssemblyError(f"expected [reg+off], got {tok!r}", line)
    reg = _parse_reg(m.group(1), line, allow_reserved)
    off = _parse_int(m.group(2), line) if m.group(2) else 0
    if not -(1 << 15) <= off < (1 << 15):
        raise AssemblyError(f"offset out of range: {off}", line)
    return reg, off


def _split_operands(rest, line):
    if not rest:
        return []
    parts = [p.strip() for p in rest.split(",")]
    if any(not p for p in parts):
        raise AssemblyError("empty operand", line)
    return parts


def assemble(text, *, privilege=Privilege.UNPRIVILEGED, context_type="",
             allow_reserved=False):
    """Assemble source text into a Program.

    One instruction per line; `;` starts a comment.  Immediates may be
    decimal or 0x-prefixed hex.  Raises AssemblyError with the offending
    line number on syntax errors, unknown mnemonics, and register misuse.
    """
    insns = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        mnem = parts[0].lower()
        ops = _split_operands(parts[1].strip() if len(parts) > 1 else "", lineno)

        if mnem == "exit":
            if ops:
                raise AssemblyError("exit takes no operands", lineno)
            insns.append(Instruction(OP_EXIT))
            continue
        if mnem == "call":
            if len(ops) != 1:
                raise AssemblyError("call takes one operand", lineno)
            insns.append(Instruction(OP_CALL, imm=_parse_int(ops[0], lineno)))
            continue
        if mnem == "ja":
            if len(ops) != 1 or not _JOFF_RE.match(ops[0]):
                raise AssemblyError("ja takes a +N/-N offset", lineno)
            insns.append(Instruction(OP_JA, off=_parse_int(ops[0], lineno)))
            continue

        if mnem in JMP_OPS:
            if len(ops) != 3 or not _JOFF_RE.match(ops[2]):
                raise AssemblyError(f"{mnem} takes dst, src|imm, +N", lineno)
            dst = _parse_reg(ops[0], lineno, allow_reserved)
            off = _parse_int(ops[2], lineno)
            base = JMP_OPS[mnem] | CLS_JMP
            if _REG_RE.match(ops[1]):
                src = _parse_reg(ops[1], lineno, allow_reserved)
                insns.append(Instruction(base | SRC_X, dst=dst, src=src, off=off))
            else:
                imm = _parse_int(ops[1], lineno)
                insns.append(Instruction(base | SRC_K, dst=dst, off=off, imm=imm))
            continue

        alu = re.fullmatch(r"([a-z]+)(64|32)", mnem)
        if alu and alu.group(1) in ALU_OPS:
            if len(ops) != 2:
                raise AssemblyError(f"{mnem} takes dst, src|imm", lineno)
            cls = CLS_ALU64 if alu.group(2) == "64" else CLS_ALU32
            dst = _parse_reg(ops[0], lineno, allow_reserved)
            if dst == FRAME_REG:
                raise AssemblyError("r10 is the frame register and read-only", lineno)
            base = ALU_OPS[alu.group(1)] | cls
            if _REG_RE.match(ops[1]):
                src = _parse_reg(ops[1], lineno, allow_reserved)
                insns.append(Instruction(base | SRC_X, dst=dst, src=src))
            else:
                imm = _parse_int(ops[1], lineno)
                if not -(1 << 31) <= imm < (1 << 31):
                    raise AssemblyError(f"immediate out of range: {imm}", lineno)
                insns.append(Instruction(base | SRC_K, dst=dst, imm=imm))
            continue

        ldx = re.fullmatch(r"ldx(b|h|w|dw)", mnem)
        if ldx:
            if len(ops) != 2:
                raise AssemblyError(f"{mnem} takes dst, [src+off]", lineno)
            dst = _parse_reg(ops[0], lineno, allow_reserved)
            src, off = _parse_mem(ops[1], lineno, allow_reserved)
            size = BYTES_TO_SIZE[_WIDTH_SUFFIX[ldx.group(1)]]
            insns.append(
                Instruction(CLS_LDX | MODE_MEM | size, dst=dst, src=src, off=off)
            )
            continue

        stx = re.fullmatch(r"stx(b|h|w|dw)", mnem)
        if stx:
            if len(ops) != 2:
                raise AssemblyError(f"{mnem} takes [dst+off], src", lineno)
            dst, off = _parse_mem(ops[0], lineno, allow_reserved)
            src = _parse_reg(ops[1], lineno, allow_reserved)
            size = BYTES_TO_SIZE[_WIDTH_SUFFIX[stx.group(1)]]
            insns.append(
                Instruction(CLS_STX | MODE_MEM | size, dst=dst, src=src, off=off)
            )
            continue

        st = re.fullmatch(r"st(b|h|w|dw)", mnem)
        if st:
            if len(ops) != 2:
                raise AssemblyError(f"{mnem} takes [dst+off], imm", lineno)
            dst, off = _parse_mem(ops[0], lineno, allow_reserved)
            imm = _parse_int(ops[1], lineno)
            size = BYTES_TO_SIZE[_WIDTH_SUFFIX[st.group(1)]]
            insns.append(
                Instruction(CLS_ST | MODE_MEM | size, dst=dst, off=off, imm=imm)
            )
            continue

        raise AssemblyError(f"unknown mnemonic {mnem!r}", lineno)

    return Program(tuple(insns), privilege=privilege, context_type=context_type)


# ---------------------------------------------------------------------------
# Disassembler
# ---------------------------------------------------------------------------

_ALU_NAMES = {v: k for k, v in ALU_OPS.items()}
_JMP_NAMES = {v: k for k, v in JMP_OPS.items()}


def _fmt_joff(off):
    return f"+{off}" if off >= 0 else str(off)


def disassemble_insn(ins):
    op = ins.opcode
    cls = op & 0x07
    if op == OP_EXIT:
        return "exit"
    if op == OP_CALL:
        return f"call {ins.imm}"
    if op == OP_JA:
        return f"ja {_fmt_joff(ins.off)}"
    if cls == CLS_JMP:
        name = _JMP_NAMES.get(op & 0xF0)
        if name is None:
            raise DecodeError(f"invalid opcode 0x{op:02x}")
        operand = f"r{ins.src}" if op & SRC_X else str(ins.imm)
        return f"{name} r{ins.dst}, {operand}, {_fmt_joff(ins.off)}"
    if cls in (CLS_ALU64, CLS_ALU32):
        name = _ALU_NAMES.get(op & 0xF0)
        if name is None:
            raise DecodeError(f"invalid opcode 0x{op:02x}")
        bits = "64" if cls == CLS_ALU64 else "32"
        operand = f"r{ins.src}" if op & SRC_X else str(ins.imm)
        return f"{name}{bits} r{ins.dst}, {operand}"
    if cls == CLS_LDX and (op & 0x60) == MODE_MEM:
        sfx = _SUFFIX_BY_WIDTH[ins.width]
        return f"ldx{sfx} r{ins.dst}, [r{ins.src}{ins.off:+d}]"
    if cls == CLS_STX and (op & 0x60) == MODE_MEM:
        sfx = _SUFFIX_BY_WIDTH[ins.width]
        return f"stx{sfx} [r{ins.dst}{ins.off:+d}], r{ins.src}"
    if cls == CLS_ST and (op & 0x60) == MODE_MEM:
        sfx = _SUFFIX_BY_WIDTH[ins.width]
        return f"st{sfx} [r{ins.dst}{ins.off:+d}], {ins.imm}"
    raise DecodeError(f"invalid opcode 0x{op:02x}")


def disassemble(program):
    """Render a program as canonical assembly text, one instruction per line."""
    return "\n".join(disassemble_insn(i) for i in program.insns)


# ---------------------------------------------------------------------------
# Binary codec
# ---------------------------------------------------------------------------

_INSN_STRUCT = struct.Struct("<BBhi")

_VALID_OPCODES = set()
for _name, _op in ALU_OPS.items():
    for _cls in (CLS_ALU64, CLS_ALU32):
        for _src in (SRC_K, SRC_X):
            _VALID_OPCODES.add(_op | _cls | _src)
for _op in JMP_OPS.values():
    for _src in (SRC_K, SRC_X):
        _VALID_OPCODES.add(_op | CLS_JMP | _src)
_VALID_OPCODES.update({OP_JA, OP_CALL, OP_EXIT})
for _size in SIZE_TO_BYTES:
    for _cls in (CLS_LDX, CLS_ST, CLS_STX):
        _VALID_OPCODES.add(_cls | MODE_MEM | _size)


def encode_insn(ins):
    return _INSN_STRUCT.pack(ins.opcode, (ins.src << 4) | ins.dst, ins.off, ins.imm)


def encode(program):
    """Serialize the instruction stream; metadata is loader-side and not encoded."""
    return b"".join(encode_insn(i) for i in program.insns)


def decode(data, *, privilege=Privilege.UNPRIVILEGED, context_type=""):
    if len(data) % 8 != 0:
        raise DecodeError(f"truncated input: {len(data)} bytes is not a multiple of 8")
    insns = []
    for i in range(0, len(data), 8):
        opcode, regs, off, imm = _INSN_STRUCT.unpack_from(data, i)
        if opcode not in _VALID_OPCODES:
            raise DecodeError(f"invalid opcode 0x{opcode:02x} at instruction {i // 8}")
        dst, src = regs & 0x0F, regs >> 4
        if dst >= NUM_REGS or src >= NUM_REGS:
            raise DecodeError(f"register out of range at instruction {i // 8}")
        insns.append(Instruction(opcode, dst=dst, src=src, off=off, imm=imm))
    return Program(tuple(insns), privilege=privilege, context_type=context_type)


def with_insns(program, insns, origins):
    """A copy of `program` with a new instruction stream and origin markers."""
    return Program(
        tuple(insns),
        privilege=program.privilege,
        context_type=program.context_type,
        origins=tuple(origins),
    )


def replace_insn(ins, **kw):
    return replace(ins, **kw)
