import pytest

from ebpfsbx.context import (
    ContextSpec,
    FieldDecl,
    KernelObject,
    KernelObjectDescriptor,
    MirroredField,
    TagPool,
    UnresolvedPath,
    mte_min_tag_object,
    prepare_context,
    restore_tags,
    sync_out,
    translate_for_helper,
)
from ebpfsbx.errors import UnknownObject
from ebpfsbx.memory import GRANULE, SimAddressSpace
from ebpfsbx.sandbox import Mode, SandboxPool


def build_skb_world():
    """The worked example: len/protocol plus a device object behind a pointer."""
    space = SimAddressSpace(size=1 << 16)
    dev_desc = KernelObjectDescriptor(
        name="net_device", size=16,
        fields=(FieldDecl("ifindex", 0, 4), FieldDecl("mtu", 4, 4)),
    )
    skb_desc = KernelObjectDescriptor(
        name="sk_buff_sim", size=32,
        fields=(
            FieldDecl("len", 0, 4),
            FieldDecl("protocol", 4, 4),
            FieldDecl("dev", 8, 8, kind="reference", target="net_device"),
        ),
    )
    dev = KernelObject("dev0", dev_desc, space.alloc(16, align=16))
    skb = KernelObject("skb0", skb_desc, space.alloc(32, align=16))
    space.write(skb.base + 0, 4, 1500)
    space.write(skb.base + 4, 4, 8)
    space.write(skb.base + 8, 8, dev.base)
    space.write(dev.base + 0, 4, 7)
    space.write(dev.base + 4, 4, 1500)
    objects_by_addr = {skb.base: skb, dev.base: dev}
    spec = ContextSpec(
        name="skb_ctx",
        fields=(
            MirroredField("len", 0, ("len",), 4, access="rw"),
            MirroredField("protocol", 4, ("protocol",), 4, access="r"),
            MirroredField("dev", 8, ("dev",), 8, access="r"),
        ),
    )
    pool = SandboxPool(space, sandbox_tag=0x4)
    return space, pool, skb, dev, spec, objects_by_addr


class TestPrepareContext:
    def test_partial_copies_exactly_accessed_fields(self):
        space, pool, skb, dev, spec, by_addr = build_skb_world()
        sb = pool.acquire(0, Mode.SFI)
        base, table, stats = prepare_context(
            sb, skb, spec, [(0, 4), (4, 4)], "partial", by_addr
        )
        assert stats.bytes_copied == 8
        assert stats.fields_copied == 2
        assert stats.heap_allocs == 0
        assert len(table.entries) == 2
        assert space.read(base, 4) == 1500
        assert space.read(base + 4, 4) == 8
        assert sb.context_end == 8

    def test_nested_reference_materialized_in_heap(self):
        space, pool, skb, dev, spec, by_addr = build_skb_world()
        sb = pool.acquire(0, Mode.SFI)
        base, table, stats = prepare_context(
            sb, skb, spec, [(0, 4), (8, 8)], "partial", by_addr
        )
        assert stats.heap_allocs == 1
        heap_ptr = space.read(base + 8, 8)
        assert sb.guest_base + sb.context_end <= heap_ptr < sb.stack_base
        assert space.read(heap_ptr + 0, 4) == 7  # ifindex copied at its offset

    def test_empty_access_set(self):
        space, pool, skb, dev, spec, by_addr = build_skb_world()
        sb = pool.acquire(0, Mode.SFI)
        base, table, stats = prepare_context(sb, skb, spec, [], "partial", by_addr)
        assert stats.bytes_copied == 0
        assert table.entries == []
        assert sb.context_end == 0

    def test_full_mode_copies_all_mirrored(self):
        space, pool, skb, dev, spec, by_addr = build_skb_world()
        sb = pool.acquire(0, Mode.SFI)
        base, table, stats = prepare_context(sb, skb, spec, [], "full", by_addr)
        assert stats.fields_copied == 3
        assert stats.heap_allocs == 1

    def test_partial_subset_of_full(self):
        space, pool, skb, dev, spec, by_addr = build_skb_world()
        sb = pool.acquire(0, Mode.SFI)
        _, _, partial = prepare_context(sb, skb, spec, [(4, 2)], "partial", by_addr)
        pool.release(sb)
        sb = pool.acquire(0, Mode.SFI)
        _, _, full = prepare_context(sb, skb, spec, [(4, 2)], "full", by_addr)
        assert partial.bytes_copied == 4  # the whole touched field, nothing else
        assert partial.bytes_copied < full.bytes_copied

    def test_mte_mode_tags_context_pointer(self):
        space, pool, skb, dev, spec, by_addr = build_skb_world()
        sb = pool.acquire(0, Mode.MTE)
        base, table, stats = prepare_context(
            sb, skb, spec, [(0, 4), (8, 8)], "partial", by_addr, tagged=True
        )
        assert base >> 56 == 0x4
        assert space.read(base + 8, 8) >> 56 == 0x4  # nested pointer tagged too

    def test_unresolved_path(self):
        space, pool, skb, dev, spec, by_addr = build_skb_world()
        sb = pool.acquire(0, Mode.SFI)
        bad = ContextSpec(
            name="bad",
            fields=(MirroredField("x", 0, ("nosuch",), 4),),
        )
        with pytest.raises(UnresolvedPath):
            prepare_context(sb, skb, bad, [(0, 4)], "partial", by_addr)

    def test_dotted_scalar_path_flattens(self):
        space, pool, skb, dev, _spec, by_addr = build_skb_world()
        sb = pool.acquire(0, Mode.SFI)
        spec = ContextSpec(
            name="flat",
            fields=(MirroredField("ifindex", 0, ("dev", "ifindex"), 4),),
        )
        base, table, stats = prepare_context(sb, skb, spec, [(0, 4)], "partial", by_addr)
        assert space.read(base, 4) == 7
        assert stats.heap_allocs == 0
        assert table.entries[0].obj is dev


class TestSyncOut:
    def test_dirty_writable_written_back(self):
        space, pool, skb, dev, spec, by_addr = build_skb_world()
        sb = pool.acquire(0, Mode.SFI)
        base, table, _ = prepare_context(sb, skb, spec, [(0, 4)], "partial", by_addr)
        space.write(base, 4, 9000)
        table.entries[0].dirty = True
        written, skipped, nbytes = sync_out(space, table)
        assert (written, skipped, nbytes) == (1, 0, 4)
        assert space.read(skb.base, 4) == 9000

    def test_read_only_skipped(self):
        space, pool, skb, dev, spec, by_addr = build_skb_world()
        sb = pool.acquire(0, Mode.SFI)
        base, table, _ = prepare_context(sb, skb, spec, [(4, 4)], "partial", by_addr)
        space.write(base + 4, 4, 99)
        table.entries[0].dirty = True
        written, skipped, nbytes = sync_out(space, table)
        assert (written, skipped) == (0, 1)
        assert space.read(skb.base + 4, 4) == 8  # kernel object untouched

    def test_nothing_dirty(self):
        space, pool, skb, dev, spec, by_addr = build_skb_world()
        sb = pool.acquire(0, Mode.SFI)
        _, table, _ = prepare_context(sb, skb, spec, [(0, 4)], "partial", by_addr)
        assert sync_out(space, table) == (0, 0, 0)


class TestTranslate:
    def test_ctx_base_translates_to_kernel_object(self):
        space, pool, skb, dev, spec, by_addr = build_skb_world()
        sb = pool.acquire(0, Mode.SFI)
        base, table, _ = prepare_context(sb, skb, spec, [(0, 4)], "partial", by_addr)
        assert translate_for_helper(table, base) is skb

    def test_heap_copy_translates(self):
        space, pool, skb, dev, spec, by_addr = build_skb_world()
        sb = pool.acquire(0, Mode.SFI)
        base, table, _ = prepare_context(sb, skb, spec, [(8, 8)], "partial", by_addr)
        heap_ptr = space.read(base + 8, 8)
        assert translate_for_helper(table, heap_ptr) is dev

    def test_unregistered_address_is_type_confusion_guard(self):
        space, pool, skb, dev, spec, by_addr = build_skb_world()
        sb = pool.acquire(0, Mode.SFI)
        base, table, _ = prepare_context(sb, skb, spec, [(0, 4)], "partial", by_addr)
        with pytest.raises(UnknownObject):
            translate_for_helper(table, base + 64)


class TestTagOnly:
    def test_single_field_one_granule_overtag(self):
        space = SimAddressSpace(size=4096)
        desc = KernelObjectDescriptor("o", 16, (FieldDecl("f", 0, 4),))
        obj = KernelObject("o0", desc, space.alloc(16, align=16))
        receipt = mte_min_tag_object(space, obj, [(0, 4)], tag=5)
        assert receipt.granules_tagged == 1
        assert receipt.overtagged_bytes == 12
        assert space.get_tag(obj.base) == 5

    def test_two_fields_one_granule_counted_once(self):
        space = SimAddressSpace(size=4096)
        desc = KernelObjectDescriptor(
            "o", 16, (FieldDecl("f", 0, 4), FieldDecl("g", 8, 4))
        )
        obj = KernelObject("o0", desc, space.alloc(16, align=16))
        receipt = mte_min_tag_object(space, obj, [(0, 4), (8, 4)], tag=5)
        assert receipt.granules_tagged == 1
        assert receipt.overtagged_bytes == 8

    def test_restoration_round_trip(self):
        space = SimAddressSpace(size=4096)
        desc = KernelObjectDescriptor("o", 48, (FieldDecl("f", 0, 48),))
        obj = KernelObject("o0", desc, space.alloc(48, align=16))
        space.set_tag_range(obj.base + 16, 16, 0x9)
        before = bytes(space.tags)
        receipt = mte_min_tag_object(space, obj, [(0, 48)], tag=3)
        assert bytes(space.tags) != before
        restore_tags(space, receipt)
        assert bytes(space.tags) == before

    def test_pool_reuse_weakens_past_fourteen(self):
        pool = TagPool()
        results = [pool.acquire(core) for core in range(17)]
        assert sum(1 for _t, weak in results if weak) >= 3
        assert all(1 <= t <= 14 for t, _w in results)
        assert not any(weak for _t, weak in results[:14])

    def test_pool_release_reissues(self):
        pool = TagPool()
        tag, weak = pool.acquire(0)
        pool.release(0)
        tag2, weak2 = pool.acquire(1)
        assert not weak2
        assert tag == tag2


class TestDescriptors:
    def test_overlapping_fields_rejected(self):
        with pytest.raises(ValueError):
            KernelObjectDescriptor(
                "o", 16, (FieldDecl("a", 0, 8), FieldDecl("b", 4, 4))
            )

    def test_oversize_field_rejected(self):
        with pytest.raises(ValueError):
            KernelObjectDescriptor("o", 8, (FieldDecl("a", 4, 8),))

    def test_ctx_overlap_rejected(self):
        with pytest.raises(ValueError):
            ContextSpec(
                "c",
                (MirroredField("a", 0, ("a",), 8), MirroredField("b", 4, ("b",), 4)),
            )
