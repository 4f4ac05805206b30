"""Kernel-object mirroring into the sandbox and context synchronization.

A context spec names which fields of a kernel object a program may see,
where each lives in the context region, and with what access mode.  On
entry the accessed fields (all mirrored fields in full mode) are copied
into the sandbox; reference fields pull the objects they point at into the
sandbox heap, recursively, so every context-resident pointer targets
sandbox memory.  A sync table remembers where each copied byte range came
from; stores that intersect an entry mark it dirty, and dirty writable
entries are copied back to the kernel object at exit or at helper
boundaries.  Helper calls that take an object argument have the sandbox
pointer swapped for the original kernel pointer — an unregistered address
is the type-confusion guard firing.

The tag-only alternative skips copying entirely: the accessed field
granules of the real kernel object are tagged for the duration of the run
(over-tagging recorded), reference fields are temporarily rewritten to
tagged pointers, and everything is restored exactly on exit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import Error, UnknownObject
from .memory import GRANULE, SimAddressSpace, strip_tag, with_tag

__all__ = [
    "FieldDecl",
    "KernelObjectDescriptor",
    "KernelObject",
    "MirroredField",
    "ContextSpec",
    "SyncEntry",
    "SyncTable",
    "TaggingReceipt",
    "TagPool",
    "UnresolvedPath",
    "prepare_context",
    "sync_out",
    "translate_for_helper",
    "mte_min_tag_object",
    "restore_tags",
]

ACCESS_R = "r"
ACCESS_W = "w"
ACCESS_RW = "rw"


class UnresolvedPath(Error):
    pass


@dataclass(frozen=True)
class FieldDecl:
    name: str
    offset: int
    size: int
    kind: str = "scalar"  # "scalar" | "reference"
    target: str = ""  # descriptor name for references

    @property
    def is_reference(self):
        return self.kind == "reference"


@dataclass(frozen=True)
class KernelObjectDescriptor:
    name: str
    size: int
    fields: tuple

    def __post_init__(self):
        spans = sorted((f.offset, f.offset + f.size) for f in self.fields)
        prev_end = 0
        for lo, hi in spans:
            if lo < prev_end or hi > self.size:
                raise ValueError(f"descriptor {self.name}: overlapping or oversize fields")
            prev_end = hi

    def field(self, name):
        for f in self.fields:
            if f.name == name:
                return f
        raise UnresolvedPath(f"descriptor {self.name} has no field {name!r}")


@dataclass
class KernelObject:
    """An instance of a descriptor materialized in the simulated kernel."""

    name: str
    descriptor: KernelObjectDescriptor
    base: int

    def field_addr(self, fdecl):
        return self.base + fdecl.offset


@dataclass(frozen=True)
class MirroredField:
    name: str
    ctx_offset: int
    path: tuple  # dotted kernel path, split
    size: int
    access: str = ACCESS_R

    @property
    def readable(self):
        return self.access in (ACCESS_R, ACCESS_RW)

    @property
    def writable(self):
        return self.access in (ACCESS_W, ACCESS_RW)


@dataclass(frozen=True)
class ContextSpec:
    name: str
    fields: tuple

    def __post_init__(self):
        spans = sorted((f.ctx_offset, f.ctx_offset + f.size) for f in self.fields)
        prev_end = 0
        for lo, hi in spans:
            if lo < prev_end:
                raise ValueError(f"context {self.name}: overlapping mirrored fields")
            prev_end = hi

    def extent(self, fields=None):
        chosen = self.fields if fields is None else fields
        if not chosen:
            return 0
        raw = max(f.ctx_offset + f.size for f in chosen)
        return (raw + 7) & ~7

    def fields_touching(self, ranges):
        out = []
        for f in self.fields:
            for lo, width in ranges:
                if lo < f.ctx_offset + f.size and lo + width > f.ctx_offset:
                    out.append(f)
                    break
        return out


@dataclass
class SyncEntry:
    sandbox_addr: int
    size: int
    obj: KernelObject
    obj_offset: int
    access: str
    dirty: bool = False
    entry_snapshot: bytes = b""

    @property
    def writable(self):
        return self.access in (ACCESS_W, ACCESS_RW)


@dataclass
class SyncTable:
    entries: list = field(default_factory=list)
    translations: dict = field(default_factory=dict)  # sandbox base -> KernelObject
    dirty_spans: list = field(default_factory=list)  # (lo, hi, entry) for the engine

    def add_entry(self, entry):
        self.entries.append(entry)
        self.dirty_spans.append(
            (entry.sandbox_addr, entry.sandbox_addr + entry.size, entry)
        )

    def register(self, sandbox_addr, obj):
        self.translations[strip_tag(sandbox_addr)] = obj

    def entries_for(self, obj):
        return [e for e in self.entries if e.obj is obj]


def _resolve_path(obj, path, objects_by_addr, space):
    """Walk a dotted path; every non-final element must be a reference field."""
    cur = obj
    for i, name in enumerate(path):
        fdecl = cur.descriptor.field(name)
        last = i == len(path) - 1
        if last:
            return cur, fdecl
        if not fdecl.is_reference:
            raise UnresolvedPath(
                f"path element {name!r} of {'.'.join(path)} is not a reference"
            )
        ptr = space.read(cur.field_addr(fdecl), 8)
        nxt = objects_by_addr.get(strip_tag(ptr))
        if nxt is None:
            raise UnresolvedPath(
                f"reference {name!r} points at no declared object (0x{ptr:x})"
            )
        cur = nxt
    raise UnresolvedPath("empty path")


@dataclass
class PrepareStats:
    bytes_copied: int = 0
    fields_copied: int = 0
    heap_allocs: int = 0
    entries: int = 0


def _materialize_object(sb, table, obj, objects_by_addr, tagged, stats, seen):
    """Copy a referenced kernel object into the sandbox heap, recursively."""
    if obj.name in seen:
        return seen[obj.name]
    space = sb.space
    heap_addr = sb.heap_alloc(obj.descriptor.size)
    stats.heap_allocs += 1
    seen[obj.name] = heap_addr
    table.register(heap_addr, obj)
    for fdecl in obj.descriptor.fields:
        src = obj.field_addr(fdecl)
        if fdecl.is_reference:
            ptr = space.read(src, 8)
            nested = objects_by_addr.get(strip_tag(ptr))
            if nested is None:
                raise UnresolvedPath(
                    f"{obj.name}.{fdecl.name} points at no declared object"
                )
            nested_addr = _materialize_object(
                sb, table, nested, objects_by_addr, tagged, stats, seen
            )
            value = with_tag(nested_addr, sb.tag) if tagged else nested_addr
            space.write(heap_addr + fdecl.offset, 8, value)
            stats.bytes_copied += 8
            # copied pointers are never synced back; the copy is structural
        else:
            data = space.read_bytes(src, fdecl.size)
            space.write_bytes(heap_addr + fdecl.offset, data)
            stats.bytes_copied += fdecl.size
            table.add_entry(
                SyncEntry(
                    sandbox_addr=heap_addr + fdecl.offset,
                    size=fdecl.size,
                    obj=obj,
                    obj_offset=fdecl.offset,
                    access=ACCESS_RW,
                    entry_snapshot=data,
                )
            )
            stats.entries += 1
    return heap_addr


def prepare_context(sb, obj, spec, access_set_ranges, copy_mode, objects_by_addr,
                    tagged=False):
    """Copy mirrored fields into the sandbox context region.

    `access_set_ranges` holds the statically collected context byte ranges;
    partial mode copies exactly the mirrored fields those ranges touch,
    full mode copies every mirrored field.  Returns
    (ctx_base, SyncTable, PrepareStats); the base carries the sandbox tag
    when tag checking is on.
    """
    space = sb.space
    if copy_mode == "full":
        included = list(spec.fields)
    elif copy_mode == "partial":
        included = spec.fields_touching(access_set_ranges)
    else:
        raise ValueError(f"unknown copy mode {copy_mode!r}")

    stats = PrepareStats()
    table = SyncTable()
    ctx_base = sb.guest_base
    sb.set_context_end(spec.extent(included))
    table.register(ctx_base, obj)
    seen = {}

    for mf in included:
        final_obj, fdecl = _resolve_path(obj, mf.path, objects_by_addr, space)
        if fdecl.size != mf.size:
            raise UnresolvedPath(
                f"mirrored field {mf.name}: declared size {mf.size} does not "
                f"match kernel field size {fdecl.size}"
            )
        dst = ctx_base + mf.ctx_offset
        if fdecl.is_reference:
            if mf.size != 8:
                raise UnresolvedPath(f"reference field {mf.name} must be 8 bytes")
            ptr = space.read(final_obj.field_addr(fdecl), 8)
            nested = objects_by_addr.get(strip_tag(ptr))
            if nested is None:
                raise UnresolvedPath(f"{mf.name} points at no declared object")
            nested_addr = _materialize_object(
                sb, table, nested, objects_by_addr, tagged, stats, seen
            )
            value = with_tag(nested_addr, sb.tag) if tagged else nested_addr
            space.write(dst, 8, value)
            stats.bytes_copied += 8
            stats.fields_copied += 1
        else:
            data = space.read_bytes(final_obj.field_addr(fdecl), mf.size)
            space.write_bytes(dst, data)
            stats.bytes_copied += mf.size
            stats.fields_copied += 1
            table.add_entry(
                SyncEntry(
                    sandbox_addr=dst,
                    size=mf.size,
                    obj=final_obj,
                    obj_offset=fdecl.offset,
                    access=mf.access,
                    entry_snapshot=data,
                )
            )
            stats.entries += 1

    sb.sync_table = table
    base = with_tag(ctx_base, sb.tag) if tagged else ctx_base
    return base, table, stats


def sync_out(space, table):
    """Write dirty writable entries back to their kernel objects.

    Returns (written_count, skipped_readonly_count, bytes_written).
    """
    written = skipped = nbytes = 0
    for entry in table.entries:
        if not entry.dirty:
            continue
        if not entry.writable:
            skipped += 1
            continue
        data = space.read_bytes(entry.sandbox_addr, entry.size)
        space.write_bytes(entry.obj.base + entry.obj_offset, data)
        entry.dirty = False
        written += 1
        nbytes += entry.size
    return written, skipped, nbytes


def flush_object(space, table, obj):
    """Pre-helper flush of one object's dirty writable fields."""
    nbytes = 0
    for entry in table.entries_for(obj):
        if entry.dirty and entry.writable:
            data = space.read_bytes(entry.sandbox_addr, entry.size)
            space.write_bytes(entry.obj.base + entry.obj_offset, data)
            entry.dirty = False
            nbytes += entry.size
    return nbytes


def refresh_object(space, table, obj):
    """Post-helper refresh of every mirrored field of one object."""
    nbytes = 0
    for entry in table.entries_for(obj):
        data = space.read_bytes(entry.obj.base + entry.obj_offset, entry.size)
        space.write_bytes(entry.sandbox_addr, data)
        entry.entry_snapshot = data
        entry.dirty = False
        nbytes += entry.size
    return nbytes


def translate_for_helper(table, sandbox_addr):
    """Sandbox object pointer -> original kernel object, or the guard fires."""
    obj = table.translations.get(strip_tag(sandbox_addr))
    if obj is None:
        raise UnknownObject(
            f"0x{sandbox_addr:x} is not a registered sandboxed object",
            addr=sandbox_addr,
        )
    return obj


# ---------------------------------------------------------------------------
# Tag-only context handling (no copies, no sync)
# ---------------------------------------------------------------------------


@dataclass
class TaggingReceipt:
    granules_tagged: int
    overtagged_bytes: int
    saved_tags: list  # (granule addr, previous tag)
    weakened: bool = False
    pointer_patches: list = field(default_factory=list)  # (addr, previous 8 bytes)


class TagPool:
    """Usable object tags 1..14; 0xE and 0xF stay reserved for the kernel."""

    USABLE = tuple(range(1, 15))

    def __init__(self):
        self._in_use = {}

    def acquire(self, core_id):
        """Returns (tag, weakened); reuse is forced once all tags are busy."""
        taken = set(self._in_use.values())
        for tag in self.USABLE:
            if tag not in taken:
                self._in_use[core_id] = tag
                return tag, False
        tag = self.USABLE[core_id % len(self.USABLE)]
        self._in_use[core_id] = tag
        return tag, True

    def release(self, core_id):
        self._in_use.pop(core_id, None)


def _granules_for_ranges(base, ranges):
    granules = set()
    covered = 0
    for off, size in ranges:
        covered += size
        lo = (base + off) // GRANULE
        hi = (base + off + size - 1) // GRANULE
        granules.update(range(lo, hi + 1))
    return granules, covered


def mte_min_tag_object(space, obj, field_ranges, tag, weakened=False):
    """Tag the granules covering the accessed fields of a real kernel object.

    `field_ranges` are (offset, size) pairs relative to the object.  The
    receipt records how many bytes beyond the accessed fields were tagged
    and the prior tag of every touched granule, for exact restoration.
    """
    granules, covered = _granules_for_ranges(obj.base, field_ranges)
    saved = []
    for g in sorted(granules):
        addr = g * GRANULE
        saved.append((addr, space.get_tag(addr)))
        space.set_tag_range(addr, GRANULE, tag)
    return TaggingReceipt(
        granules_tagged=len(granules),
        overtagged_bytes=len(granules) * GRANULE - covered,
        saved_tags=saved,
        weakened=weakened,
    )


def restore_tags(space, receipt):
    """Put every touched granule's tag back to its pre-entry value."""
    for addr, tag in receipt.saved_tags:
        space.set_tag_range(addr, GRANULE, tag)
    for addr, data in receipt.pointer_patches:
        space.write_bytes(addr, data)
