import random

import pytest

from ebpfsbx.errors import Error
from ebpfsbx.instrument import mask_address
from ebpfsbx.memory import Context, POLICY_SYNC, SimAddressSpace, with_tag
from ebpfsbx.sandbox import (
    CoreBusy,
    DoubleEnter,
    ExitWithoutEnter,
    GUEST_SIZE,
    HEAP_LIMIT,
    METADATA_SIZE,
    Mode,
    OutOfSandboxMemory,
    PAGE_SIZE,
    SandboxPool,
    STACK_SIZE,
    ZeroAlloc,
)


@pytest.fixture
def pool():
    return SandboxPool(SimAddressSpace(size=1 << 16), sandbox_tag=0x4)


def test_layout_constants():
    assert METADATA_SIZE + GUEST_SIZE == PAGE_SIZE
    assert STACK_SIZE == 512
    assert PAGE_SIZE == 4096


class TestAcquireRelease:
    def test_fresh_acquire_zeroed(self, pool):
        sb = pool.acquire(0, Mode.SFI)
        assert pool.space.read_bytes(sb.guest_base, GUEST_SIZE) == bytes(GUEST_SIZE)
        assert sb.guest_base % 2048 == 0
        assert sb.mask.and_mask == 0x7FF
        assert sb.mask.or_mask == sb.guest_base

    def test_reuse_same_page_rezeroed(self, pool):
        sb = pool.acquire(0, Mode.SFI)
        page = sb.page_base
        pool.space.write_bytes(sb.guest_base, b"\xAB" * 64)
        pool.release(sb)
        sb2 = pool.acquire(0, Mode.SFI)
        assert sb2.page_base == page
        assert pool.space.read_bytes(sb2.guest_base, GUEST_SIZE) == bytes(GUEST_SIZE)

    def test_core_busy(self, pool):
        pool.acquire(0, Mode.SFI)
        with pytest.raises(CoreBusy):
            pool.acquire(0, Mode.SFI)

    def test_distinct_cores_distinct_pages(self, pool):
        a = pool.acquire(0, Mode.SFI)
        b = pool.acquire(1, Mode.SFI)
        assert a.page_base != b.page_base

    def test_guard_core_blocks_acquire(self, pool):
        pool.guard_core(2)
        with pytest.raises(CoreBusy):
            pool.acquire(2, Mode.SFI)
        pool.release_core(2)
        pool.acquire(2, Mode.SFI)

    def test_tag_separation_mte(self, pool):
        sb = pool.acquire(0, Mode.MTE)
        space = pool.space
        for off in range(0, GUEST_SIZE, 16):
            assert space.get_tag(sb.guest_base + off) == 0x4
        for off in range(0, METADATA_SIZE, 16):
            assert space.get_tag(sb.page_base + off) == 0xE

    def test_untagged_modes_keep_kernel_tag(self, pool):
        sb = pool.acquire(0, Mode.SFI)
        assert pool.space.get_tag(sb.guest_base) == 0xE


class TestHeap:
    def test_layout_arithmetic(self, pool):
        sb = pool.acquire(0, Mode.SFI)
        sb.set_context_end(64)
        addr = sb.heap_alloc(40)
        assert addr == sb.guest_base + 64
        assert sb.heap_bump == 104

    def test_rounding_to_eight(self, pool):
        sb = pool.acquire(0, Mode.SFI)
        sb.set_context_end(0)
        sb.heap_alloc(3)
        assert sb.heap_bump == 8

    def test_crossing_stack_region(self, pool):
        sb = pool.acquire(0, Mode.SFI)
        sb.set_context_end(64)
        with pytest.raises(OutOfSandboxMemory):
            sb.heap_alloc(GUEST_SIZE - 64 - STACK_SIZE + 1)
        # the exact fit still works
        sb.heap_alloc(GUEST_SIZE - 64 - STACK_SIZE)

    def test_zero_alloc(self, pool):
        sb = pool.acquire(0, Mode.SFI)
        with pytest.raises(ZeroAlloc):
            sb.heap_alloc(0)

    def test_bump_lives_in_metadata(self, pool):
        sb = pool.acquire(0, Mode.SFI)
        sb.set_context_end(16)
        assert pool.space.read(sb.page_base + 8, 8) == 16


class TestEnterExit:
    def test_round_trip(self, pool):
        sb = pool.acquire(0, Mode.SFI)
        top = sb.enter(0xCAFE)
        assert top == sb.guest_base + GUEST_SIZE
        assert sb.exit() == 0xCAFE

    def test_saved_value_survives_guest_tampering(self, pool):
        sb = pool.acquire(0, Mode.MTE)
        sb.enter(0xCAFE)
        # the guest scribbles over everything it can reach
        space = pool.space
        for off in range(0, GUEST_SIZE, 8):
            space.write(with_tag(sb.guest_base + off, 0x4), 8,
                        0xFFFFFFFFFFFFFFFF, POLICY_SYNC, Context.GUEST)
        assert sb.exit() == 0xCAFE

    def test_double_enter(self, pool):
        sb = pool.acquire(0, Mode.SFI)
        sb.enter(1)
        with pytest.raises(DoubleEnter):
            sb.enter(2)

    def test_exit_without_enter(self, pool):
        sb = pool.acquire(0, Mode.SFI)
        with pytest.raises(ExitWithoutEnter):
            sb.exit()

    def test_release_requires_active(self, pool):
        sb = pool.acquire(0, Mode.SFI)
        pool.release(sb)
        with pytest.raises(Error):
            pool.release(sb)


class TestMaskInvariants:
    def test_masked_closure_idempotence_fixed_point(self, pool):
        sb = pool.acquire(0, Mode.SFI)
        rng = random.Random(42)
        lo, hi = sb.guest_base, sb.guest_base + GUEST_SIZE
        for _ in range(10_000):
            a = rng.getrandbits(64)
            m = mask_address(a, sb.mask)
            assert lo <= m < hi
            assert mask_address(m, sb.mask) == m
        for _ in range(10_000):
            a = rng.randrange(lo, hi)
            assert mask_address(a, sb.mask) == a

    def test_metadata_never_reachable(self, pool):
        sb = pool.acquire(0, Mode.SFI)
        rng = random.Random(43)
        meta_lo, meta_hi = sb.page_base, sb.page_base + METADATA_SIZE
        for _ in range(10_000):
            m = mask_address(rng.getrandbits(64), sb.mask)
            assert not meta_lo <= m < meta_hi
