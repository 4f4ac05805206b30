"""Array maps: an isolated value region plus metadata outside guest reach.

The value region is sized up to the next power of two (at least one granule)
so it can carry its own mask pair; under tag checking it shares the sandbox
tag.  Map metadata — a reference count and a lock token — lives in a
separate allocation that no masked address can reach and whose granules
keep the kernel tag.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import Error
from .instrument import MaskPair, compute_masks
from .memory import GRANULE, SimAddressSpace

__all__ = ["MapDescriptor", "create_array_map", "ZeroSized", "LengthMismatch"]

_META_SIZE = 16  # refcount (8) + lock token (8)


class ZeroSized(Error):
    pass


class LengthMismatch(Error):
    pass


def _next_pow2(n):
    return 1 << (n - 1).bit_length()


@dataclass
class MapDescriptor:
    map_id: int
    value_size: int
    max_entries: int
    base: int
    region_size: int
    mask: MaskPair
    tag: int
    metadata_base: int

    def element_addr(self, index):
        if 0 <= index < self.max_entries:
            return self.base + index * self.value_size
        return 0

    def lookup(self, index):
        """Element address for an in-range index, else 0 (a miss)."""
        return self.element_addr(index)

    def update(self, space, index, value):
        """Write one element; atomic at value granularity."""
        if len(value) != self.value_size:
            raise LengthMismatch(
                f"value of {len(value)} bytes for a {self.value_size}-byte map"
            )
        addr = self.element_addr(index)
        if addr == 0:
            return False
        space.write_bytes(addr, value)
        return True

    def read_element(self, space, index):
        addr = self.element_addr(index)
        if addr == 0:
            return None
        return space.read_bytes(addr, self.value_size)

    def metadata_range(self):
        return (self.metadata_base, _META_SIZE)


def create_array_map(space, map_id, value_size, max_entries, tagged, sandbox_tag):
    """Allocate and zero an array map before any program is loaded."""
    if value_size < 1 or max_entries < 1:
        raise ZeroSized("value_size and max_entries must be at least 1")
    region_size = max(GRANULE, _next_pow2(value_size * max_entries))
    metadata_base = space.alloc(_META_SIZE, align=GRANULE)
    # the extra granule is spill slack for a masked store issued at the last
    # region byte; it belongs to the map's reservation and is never addressed
    base = space.alloc(region_size + GRANULE, align=region_size)
    space.write_bytes(base, bytes(region_size))
    space.write(metadata_base, 8, 1)  # refcount
    if tagged:
        space.set_tag_range(base, region_size, sandbox_tag)
    return MapDescriptor(
        map_id=map_id,
        value_size=value_size,
        max_entries=max_entries,
        base=base,
        region_size=region_size,
        mask=compute_masks(base, region_size),
        tag=sandbox_tag,
        metadata_base=metadata_base,
    )
