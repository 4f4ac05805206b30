import random

import pytest

from ebpfsbx.errors import ArenaExhausted, OutOfArena, TagMismatch
from ebpfsbx.memory import (
    ARENA_BASE,
    Context,
    GRANULE,
    NotGranuleAligned,
    NotGranuleMultiple,
    POLICY_OFF,
    POLICY_SYNC,
    SimAddressSpace,
    strip_tag,
    tag_of,
    with_tag,
)


@pytest.fixture
def space():
    return SimAddressSpace(size=1 << 16)


class TestTaggedAddress:
    def test_tag_bits_56_to_59(self):
        a = with_tag(ARENA_BASE + 0x123, 0x7)
        assert tag_of(a) == 0x7
        assert (a >> 56) & 0xF == 0x7

    def test_strip_clears_48_to_63(self):
        a = with_tag(ARENA_BASE + 0x123, 0xF) | (0x5A << 58)
        assert strip_tag(a) == ARENA_BASE + 0x123

    def test_with_strip_round_trip(self):
        rng = random.Random(5)
        for _ in range(1000):
            a = rng.getrandbits(48) | (rng.randrange(16) << 56)
            assert with_tag(strip_tag(a), tag_of(a)) == a


class TestReadWrite:
    def test_round_trip_tagged(self, space):
        space.set_tag_range(space.base, 32, 0x4)
        addr = with_tag(space.base + 8, 0x4)
        space.write(addr, 8, 0x1122334455667788, POLICY_SYNC, Context.GUEST)
        got = space.read(addr, 8, POLICY_SYNC, Context.GUEST)
        assert got == 0x1122334455667788

    def test_mismatch_faults_before_transfer(self, space):
        addr = with_tag(space.base, 0x4)  # granule keeps the kernel tag 0xE
        space.write(space.base, 8, 0xAAAA)
        with pytest.raises(TagMismatch) as exc:
            space.write(addr, 8, 0x5555, POLICY_SYNC, Context.GUEST)
        assert exc.value.ptr_tag == 0x4
        assert exc.value.mem_tag == 0xE
        assert space.read(space.base, 8) == 0xAAAA  # nothing transferred

    def test_read_mismatch(self, space):
        with pytest.raises(TagMismatch):
            space.read(with_tag(space.base, 0x4), 4, POLICY_SYNC, Context.GUEST)

    def test_host_context_matches_all(self, space):
        space.set_tag_range(space.base, 16, 0x9)
        assert space.read(with_tag(space.base, 0x4), 8, POLICY_SYNC, Context.HOST) == 0

    def test_guest_matchall_pointer_still_checked(self, space):
        # in guest context the match-all convention never applies
        with pytest.raises(TagMismatch):
            space.read(with_tag(space.base, 0xF), 8, POLICY_SYNC, Context.GUEST)

    def test_access_spanning_two_granules_checks_both(self, space):
        space.set_tag_range(space.base, 16, 0x4)  # second granule stays 0xE
        addr = with_tag(space.base + 12, 0x4)
        with pytest.raises(TagMismatch):
            space.read(addr, 8, POLICY_SYNC, Context.GUEST)

    def test_out_of_arena(self, space):
        with pytest.raises(OutOfArena):
            space.read(space.base + space.size - 4, 8)
        with pytest.raises(OutOfArena):
            space.read(space.base - 8, 8)

    def test_little_endian(self, space):
        space.write_bytes(space.base, b"\x01\x02\x03\x04\x05\x06\x07\x08")
        assert space.read(space.base, 4) == 0x04030201


class TestSetTagRange:
    def test_covered_granules(self, space):
        space.set_tag_range(space.base, 32, 4)
        assert space.get_tag(space.base) == 4
        assert space.get_tag(space.base + 17) == 4
        assert space.get_tag(space.base + 32) == 0xE

    def test_not_granule_aligned(self, space):
        with pytest.raises(NotGranuleAligned):
            space.set_tag_range(space.base + 8, 16, 4)

    def test_not_granule_multiple(self, space):
        with pytest.raises(NotGranuleMultiple):
            space.set_tag_range(space.base, 20, 4)
        with pytest.raises(NotGranuleMultiple):
            space.set_tag_range(space.base, 0, 4)

    def test_tag_range_validation(self, space):
        with pytest.raises(ValueError):
            space.set_tag_range(space.base, 16, 16)

    def test_tag_store_shape(self, space):
        assert len(space.tags) == space.size // GRANULE

    def test_uniformity_random_ops(self, space):
        # after any sequence of valid tag writes, a granule reads one tag
        rng = random.Random(99)
        for _ in range(2000):
            g = rng.randrange(space.size // GRANULE - 4)
            n = rng.randint(1, 4)
            space.set_tag_range(space.base + g * GRANULE, n * GRANULE, rng.randrange(16))
            probe = space.base + rng.randrange(space.size - 1)
            base = probe - (strip_tag(probe) - space.base) % GRANULE
            tags = {space.get_tag(base + i) for i in range(GRANULE)}
            assert len(tags) == 1


class TestGuestNoBypass:
    def test_property_10000_pairs(self, space):
        rng = random.Random(20240111)
        for _ in range(10_000):
            ptr_tag = rng.randrange(16)
            mem_tag = rng.randrange(16)
            g = rng.randrange(space.size // GRANULE)
            base = space.base + g * GRANULE
            space.set_tag_range(base, GRANULE, mem_tag)
            addr = with_tag(base + rng.randrange(8), ptr_tag)
            if ptr_tag == mem_tag:
                space.read(addr, 4, POLICY_SYNC, Context.GUEST)
            else:
                with pytest.raises(TagMismatch):
                    space.read(addr, 4, POLICY_SYNC, Context.GUEST)


class TestSnapshot:
    def test_stable_when_untouched(self, space):
        assert space.snapshot() == space.snapshot()

    def test_changes_outside_exclusions(self, space):
        before = space.snapshot(exclude=[(space.base, 64)])
        space.write(space.base + 128, 4, 7)
        assert space.snapshot(exclude=[(space.base, 64)]) != before

    def test_unchanged_inside_exclusions(self, space):
        before = space.snapshot(exclude=[(space.base + 64, 64)])
        space.write(space.base + 96, 8, 0xDEAD)
        assert space.snapshot(exclude=[(space.base + 64, 64)]) == before

    def test_exclusion_bounds_checked(self, space):
        with pytest.raises(ValueError):
            space.snapshot(exclude=[(space.base + space.size - 8, 16)])


class TestAlloc:
    def test_alignment_and_exhaustion(self):
        space = SimAddressSpace(size=4096)
        a = space.alloc(100, align=64)
        assert strip_tag(a) % 64 == 0
        b = space.alloc(16, align=16)
        assert b >= a + 100
        with pytest.raises(ArenaExhausted):
            space.alloc(8192)

    def test_base_constant(self):
        assert SimAddressSpace(size=4096).base == 0x4000_0000_0000
        assert ARENA_BASE % 4096 == 0
        assert tag_of(ARENA_BASE) == 0
