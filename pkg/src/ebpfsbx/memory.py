"""Simulated 64-bit kernel address space with a memory-tag model.

The arena is a flat byte array standing in for kernel memory, mapped at a
fixed simulated virtual base.  Every 16-byte granule of the arena carries a
4-bit tag; addresses carry a matching tag in bits 56-59.  Arena indexing
strips bits 48-63 of an address (top-byte-ignore without a page-table
model).  In synchronous checking mode a guest-context access whose pointer
tag differs from the granule tag faults before any byte is transferred;
host-context accesses bypass tag checks entirely, modelling the kernel's
match-all convention.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum

from .errors import ArenaExhausted, Error, OutOfArena, TagMismatch

__all__ = [
    "GRANULE",
    "ARENA_BASE",
    "DEFAULT_MEM_TAG",
    "SANDBOX_TAG",
    "MATCHALL_TAG",
    "TagMode",
    "TagPolicy",
    "Context",
    "SimAddressSpace",
    "tag_of",
    "with_tag",
    "strip_tag",
]

GRANULE = 16
ARENA_BASE = 0x4000_0000_0000  # 4096-aligned, tag bits clear
DEFAULT_MEM_TAG = 0xE  # everything that is not sandboxed data
SANDBOX_TAG = 0x4
MATCHALL_TAG = 0xF

_TAG_SHIFT = 56
_TAG_MASK = 0xF << _TAG_SHIFT
_LOW48 = (1 << 48) - 1
_MASK64 = (1 << 64) - 1


def tag_of(addr):
    return (addr >> _TAG_SHIFT) & 0xF


def with_tag(addr, tag):
    return (addr & ~_TAG_MASK & _MASK64) | (tag & 0xF) << _TAG_SHIFT


def strip_tag(addr):
    """Clear bits 48-63 before arena indexing."""
    return addr & _LOW48


class TagMode(str, Enum):
    OFF = "off"
    SYNC = "sync"
    # async/asymmetric checking exists in real hardware but is rejected at
    # config load; only synchronous checking is modelled.


class Context(str, Enum):
    GUEST = "guest"
    HOST = "host"


@dataclass(frozen=True)
class TagPolicy:
    mode: TagMode = TagMode.OFF
    sandbox_tag: int = SANDBOX_TAG
    kernel_matchall_tag: int = MATCHALL_TAG

    def checks(self, context):
        return self.mode == TagMode.SYNC and context == Context.GUEST


POLICY_OFF = TagPolicy(TagMode.OFF)
POLICY_SYNC = TagPolicy(TagMode.SYNC)


class NotGranuleAligned(Error):
    pass


class NotGranuleMultiple(Error):
    pass


class SimAddressSpace:
    """Flat arena plus tag store and a bump allocator for world layout."""

    def __init__(self, size=1 << 20, base=ARENA_BASE, default_mem_tag=DEFAULT_MEM_TAG):
        if size % GRANULE != 0:
            raise ValueError("arena size must be a multiple of the granule size")
        if base % 4096 != 0 or tag_of(base) != 0:
            raise ValueError("arena base must be page-aligned with clear tag bits")
        self.size = size
        self.base = base
        self.default_mem_tag = default_mem_tag
        self.arena = bytearray(size)
        self.tags = bytearray([default_mem_tag]) * (size // GRANULE)
        self._bump = 0

    # -- layout ------------------------------------------------------------

    def alloc(self, size, align=8):
        """Allocate a fresh region; no free (world layout is append-only)."""
        if size <= 0:
            raise ValueError("allocation size must be positive")
        start = (self._bump + align - 1) & ~(align - 1)
        if start + size > self.size:
            raise ArenaExhausted(
                f"arena exhausted: need {size} at offset {start}, size {self.size}"
            )
        self._bump = start + size
        return self.base + start

    def contains(self, addr, length=1):
        idx = strip_tag(addr) - self.base
        return 0 <= idx and idx + length <= self.size

    def _index(self, addr, length):
        idx = strip_tag(addr) - self.base
        if idx < 0 or idx + length > self.size:
            raise OutOfArena(
                f"access outside arena: 0x{addr:x}+{length}", addr=addr
            )
        return idx

    # -- tagged access -----------------------------------------------------

    def _check_tags(self, addr, idx, length):
        ptr_tag = tag_of(addr)
        tags = self.tags
        g0 = idx >> 4
        g1 = (idx + length - 1) >> 4
        for g in range(g0, g1 + 1):
            if tags[g] != ptr_tag:
                raise TagMismatch(
                    f"tag mismatch at 0x{addr:x}: pointer {ptr_tag:#x}, "
                    f"memory {tags[g]:#x}",
                    addr=addr,
                    ptr_tag=ptr_tag,
                    mem_tag=tags[g],
                )

    def read(self, addr, length, policy=POLICY_OFF, context=Context.HOST):
        idx = self._index(addr, length)
        if policy.checks(context):
            self._check_tags(addr, idx, length)
        return int.from_bytes(self.arena[idx : idx + length], "little")

    def write(self, addr, length, value, policy=POLICY_OFF, context=Context.HOST):
        idx = self._index(addr, length)
        if policy.checks(context):
            self._check_tags(addr, idx, length)
        self.arena[idx : idx + length] = (value & ((1 << (8 * length)) - 1)).to_bytes(
            length, "little"
        )

    def read_bytes(self, addr, length, policy=POLICY_OFF, context=Context.HOST):
        idx = self._index(addr, length)
        if policy.checks(context):
            self._check_tags(addr, idx, length)
        return bytes(self.arena[idx : idx + length])

    def write_bytes(self, addr, data, policy=POLICY_OFF, context=Context.HOST):
        idx = self._index(addr, len(data))
        if policy.checks(context):
            self._check_tags(addr, idx, len(data))
        self.arena[idx : idx + len(data)] = data

    # -- tag store ---------------------------------------------------------

    def set_tag_range(self, addr, length, tag):
        if not 0 <= tag <= 0xF:
            raise ValueError(f"tag out of range: {tag}")
        if strip_tag(addr) % GRANULE != 0:
            raise NotGranuleAligned(f"0x{addr:x} is not 16-byte aligned")
        if length <= 0 or length % GRANULE != 0:
            raise NotGranuleMultiple(f"{length} is not a positive multiple of 16")
        idx = self._index(addr, length)
        g0 = idx >> 4
        for g in range(g0, g0 + length // GRANULE):
            self.tags[g] = tag

    def get_tag(self, addr):
        idx = self._index(addr, 1)
        return self.tags[idx >> 4]

    # -- observation -------------------------------------------------------

    def snapshot(self, exclude=()):
        """Stable digest of arena bytes outside the excluded address ranges."""
        spans = []
        for start, length in exclude:
            lo = strip_tag(start) - self.base
            hi = lo + length
            if lo < 0 or hi > self.size:
                raise ValueError("exclusion range outside arena")
            spans.append((lo, hi))
        spans.sort()
        h = hashlib.sha256()
        view = memoryview(self.arena)
        pos = 0
        for lo, hi in spans:
            if lo > pos:
                h.update(view[pos:lo])
            pos = max(pos, hi)
        if pos < self.size:
            h.update(view[pos:])
        return h.hexdigest()
