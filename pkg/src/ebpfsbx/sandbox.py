"""Per-core sandbox page: layout, pool reuse, heap, stack-switch bookkeeping.

Each logical core owns at most one 4096-byte sandbox page.  The first half
holds metadata the guest can never reach (the saved stack register, heap
bookkeeping, a sync-table token, mask copies); the second half is the
guest-visible partition: context at the lowest addresses, heap in the
middle, and a 512-byte stack at the top growing downward.  Pages are reused
across runs and the guest partition is zeroed on every acquisition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .errors import Error
from .instrument import MaskPair, compute_masks
from .memory import Context, DEFAULT_MEM_TAG, GRANULE, SimAddressSpace

__all__ = [
    "PAGE_SIZE",
    "METADATA_SIZE",
    "GUEST_SIZE",
    "STACK_SIZE",
    "Mode",
    "Sandbox",
    "SandboxPool",
    "CoreBusy",
    "ZeroAlloc",
    "OutOfSandboxMemory",
    "DoubleEnter",
    "ExitWithoutEnter",
]

PAGE_SIZE = 4096
METADATA_SIZE = 2048
GUEST_SIZE = PAGE_SIZE - METADATA_SIZE
STACK_SIZE = 512
HEAP_LIMIT = GUEST_SIZE - STACK_SIZE

# Metadata partition byte layout (model-internal, not derived from anything):
# saved stack register at +0, heap bump at +8, sync-table token at +16,
# and_mask copy at +24, or_mask copy at +32.
_META_SAVED_SP = 0
_META_HEAP_BUMP = 8
_META_SYNC_TOKEN = 16
_META_AND_MASK = 24
_META_OR_MASK = 32


class Mode(str, Enum):
    VANILLA = "vanilla"
    SFI = "sfi"
    MTE = "mte"
    MTE_MIN = "mte-min"

    @property
    def tagged(self):
        return self in (Mode.MTE, Mode.MTE_MIN)


class CoreBusy(Error):
    pass


class ZeroAlloc(Error):
    pass


class OutOfSandboxMemory(Error):
    pass


class DoubleEnter(Error):
    pass


class ExitWithoutEnter(Error):
    pass


@dataclass
class Sandbox:
    core_id: int
    page_base: int
    space: SimAddressSpace
    mask: MaskPair
    tag: int
    active: bool = False
    entered: bool = False
    context_end: int = 0
    sync_table: object = None

    @property
    def guest_base(self):
        return self.page_base + METADATA_SIZE

    @property
    def stack_base(self):
        return self.guest_base + HEAP_LIMIT

    @property
    def stack_top(self):
        return self.guest_base + GUEST_SIZE

    def _meta_read(self, off):
        return self.space.read(self.page_base + off, 8)

    def _meta_write(self, off, value):
        self.space.write(self.page_base + off, 8, value)

    @property
    def heap_bump(self):
        return self._meta_read(_META_HEAP_BUMP)

    def set_context_end(self, size):
        if size % 8 or size < 0 or size > HEAP_LIMIT:
            raise OutOfSandboxMemory(f"context of {size} bytes does not fit")
        self.context_end = size
        self._meta_write(_META_HEAP_BUMP, size)

    def heap_alloc(self, size):
        """Bump-allocate 8-aligned guest heap memory; freed only at release."""
        if size <= 0:
            raise ZeroAlloc("heap allocation of zero bytes")
        rounded = (size + 7) & ~7
        bump = self.heap_bump
        if bump + rounded > HEAP_LIMIT:
            raise OutOfSandboxMemory(
                f"heap allocation of {size} bytes would cross the stack region"
            )
        self._meta_write(_META_HEAP_BUMP, bump + rounded)
        return self.guest_base + bump

    def enter(self, stack_register_value):
        """Save the caller's stack register in metadata; yield the guest stack top."""
        if not self.active:
            raise Error("sandbox is not active")
        if self.entered:
            raise DoubleEnter(f"core {self.core_id} sandbox already entered")
        self.entered = True
        self._meta_write(_META_SAVED_SP, stack_register_value)
        return self.stack_top

    def exit(self):
        """Restore the exact saved stack register value."""
        if not self.entered:
            raise ExitWithoutEnter(f"core {self.core_id} sandbox was never entered")
        self.entered = False
        return self._meta_read(_META_SAVED_SP)


class SandboxPool:
    """Registry of per-core pages; acquire/release is the one-program-per-core gate."""

    def __init__(self, space, sandbox_tag):
        self.space = space
        self.sandbox_tag = sandbox_tag
        self._pages = {}
        self._busy = set()

    def ensure_page(self, core_id):
        if core_id not in self._pages:
            # one trailing slack granule absorbs the <=7-byte spill of a
            # masked store issued at the last byte of the guest partition
            self._pages[core_id] = self.space.alloc(
                PAGE_SIZE + GRANULE, align=PAGE_SIZE
            )
        return self._pages[core_id]

    def page_for_core(self, core_id):
        return self.ensure_page(core_id)

    def guest_mask(self, core_id):
        return compute_masks(self.ensure_page(core_id) + METADATA_SIZE, GUEST_SIZE)

    def guard_core(self, core_id):
        """Reserve a core without materializing a sandbox (baseline runs)."""
        if core_id in self._busy:
            raise CoreBusy(f"core {core_id} is already running a program")
        self._busy.add(core_id)

    def release_core(self, core_id):
        self._busy.discard(core_id)

    def acquire(self, core_id, mode):
        if core_id in self._busy:
            raise CoreBusy(f"core {core_id} is already running a program")
        page = self.ensure_page(core_id)
        self._busy.add(core_id)
        space = self.space
        space.write_bytes(page, bytes(PAGE_SIZE))
        guest = page + METADATA_SIZE
        tag = self.sandbox_tag if mode.tagged else space.default_mem_tag
        space.set_tag_range(guest, GUEST_SIZE, tag)
        space.set_tag_range(page, METADATA_SIZE, space.default_mem_tag)
        mask = compute_masks(guest, GUEST_SIZE)
        sb = Sandbox(
            core_id=core_id,
            page_base=page,
            space=space,
            mask=mask,
            tag=tag,
            active=True,
        )
        sb._meta_write(_META_AND_MASK, mask.and_mask)
        sb._meta_write(_META_OR_MASK, mask.or_mask)
        return sb

    def release(self, sandbox):
        if not sandbox.active:
            raise Error("sandbox is not active")
        sandbox.active = False
        sandbox.sync_table = None
        self._busy.discard(sandbox.core_id)
