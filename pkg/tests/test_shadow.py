import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from crum import _sys, kernels
from crum.errors import AddressUnavailable, CycleViolation, NotShadowAddress, Overlap, RangeOutOfBounds
from crum.shadow import NONE, RO, RW, Mode, Phase, ShadowTable, page_runs

PS = _sys.PAGE_SIZE
BASE = 0x300000000000


class FakePort:
    """Real pages held in plain arrays; records every transfer."""

    def __init__(self):
        self.real = {}
        self.fetches = []
        self.pushes = []
        self.inflight = set()

    def fetch(self, r, offset, length):
        self.fetches.append((r.real_region, offset, length))
        r.mem[offset:offset + length] = self.real[r.real_region][offset:offset + length]

    def push(self, r, offset, length):
        self.pushes.append((r.real_region, offset, length))
        self.real[r.real_region][offset:offset + length] = r.mem[offset:offset + length]


@pytest.fixture
def make_table():
    tables = []

    def make(mode=Mode.NORMAL, **kw):
        port = FakePort()
        t = ShadowTable(port, PS, mode, **kw)
        tables.append(t)
        return t, port

    yield make
    for t in tables:
        t.clear()


_next_base = [BASE]


def add_region(t, port, rid, npages, length=None):
    length = length or npages * PS
    port.real[rid] = np.zeros(npages * PS, dtype=np.uint8)
    r = t.create_shadow(rid, length, _next_base[0])
    _next_base[0] += (npages + 1) * PS
    return r


def test_page_runs():
    m = np.zeros(12, dtype=bool)
    assert page_runs(m) == []
    m[[3, 4, 5, 9]] = True
    assert page_runs(m) == [(3, 3), (9, 1)]
    assert page_runs(np.ones(4, dtype=bool)) == [(0, 4)]


def test_create_shadow_all_dirty_and_writable(make_table):
    t, port = make_table()
    r = add_region(t, port, 1, 16)
    assert r.phase is Phase.WRITE_PHASE
    assert r.dirty.sum() == 16 and (r.prot == RW).all()
    t.check_invariants(platform=True)
    assert t.flush_dirty() == 16
    assert port.pushes == [(1, 0, 16 * PS)]            # one bulk write of the whole region
    assert r.phase is Phase.PROTECTED
    t.check_invariants(platform=True)


def test_unaligned_length_is_rounded(make_table):
    t, port = make_table()
    port.real[1] = np.zeros(2 * PS, dtype=np.uint8)
    r = t.create_shadow(1, PS + 10, _next_base[0])
    _next_base[0] += 4 * PS
    assert r.npages == 2 and r.mapped_length == 2 * PS and r.length == PS + 10
    t.flush_dirty()
    assert port.pushes == [(1, 0, PS + 10)]
    with pytest.raises(RangeOutOfBounds):
        t.read(r.base + PS + 5, 6)


def test_overlap_and_address_in_use(make_table):
    t, port = make_table()
    r = add_region(t, port, 1, 4)
    with pytest.raises(Overlap):
        t.create_shadow(2, PS, r.base + PS)
    t2, _ = make_table()
    with pytest.raises(AddressUnavailable):
        t2.create_shadow(9, PS, r.base)


def test_lookup_is_total_over_shadow_pages(make_table):
    t, port = make_table()
    regs = [add_region(t, port, i, n) for i, n in [(1, 3), (2, 1), (3, 7)]]
    for r in regs:
        for p in range(r.npages):
            assert t.lookup(r.base + p * PS + 17) is r
        assert t.lookup(r.end) is not r
    assert t.lookup(BASE - 1) is None
    with pytest.raises(NotShadowAddress):
        t.on_fault(BASE - PS, "read")


@pytest.mark.parametrize("npages,expected", [(64, 7), (256, 9), (100, 7), (2, 1), (8, 1), (9, 4)])
def test_sequential_read_fault_count(make_table, npages, expected):
    t, port = make_table()
    r = add_region(t, port, 1, npages)
    port.real[1][:] = np.arange(npages * PS) % 251
    t.flush_dirty()
    r.dirty[:] = False
    port.real[1][:] = np.arange(npages * PS) % 251      # a kernel result
    before = t.stats.read_faults
    for p in range(npages):
        t.read(r.base + p * PS, PS)
    assert t.stats.read_faults - before == expected
    assert np.array_equal(r.mem, port.real[1])
    t.check_invariants(platform=True)


def test_power_of_two_fault_bound(make_table):
    for k in range(0, 9):
        t, port = make_table(small_region_pages=0)
        n = 1 << k
        r = add_region(t, port, 1, n)
        t.flush_dirty()
        t.read(r.base, n * PS)
        assert t.stats.read_faults == math.ceil(math.log2(n)) + 1, n
        t.clear()


def test_fetch_sizes_double_then_clamp(make_table):
    t, port = make_table()
    r = add_region(t, port, 1, 64)
    t.flush_dirty()
    t.read(r.base, 64 * PS)
    assert [n // PS for _, _, n in port.fetches] == [1, 2, 4, 8, 16, 32, 1]
    assert r.prefetch_window <= r.window_cap == 64


def test_window_resets_after_flush(make_table):
    t, port = make_table()
    r = add_region(t, port, 1, 64)
    t.flush_dirty()
    t.read(r.base, 4 * PS)
    assert r.prefetch_window == 8
    t.flush_dirty()
    assert r.prefetch_window == 1
    port.fetches.clear()
    t.read(r.base, 1)
    assert port.fetches == [(1, 0, PS)]


def test_coalescing_two_runs(make_table):
    t, port = make_table()
    r = add_region(t, port, 1, 16)
    t.flush_dirty()
    port.pushes.clear()
    for p in (3, 4, 5, 9):
        t.write(r.base + p * PS + 8, b"x")
    assert t.flush_dirty() == 4
    assert port.pushes == [(1, 3 * PS, 3 * PS), (1, 9 * PS, PS)]


def test_flush_idempotence(make_table):
    t, port = make_table()
    r = add_region(t, port, 1, 8)
    t.write(r.base, b"abc")
    assert t.flush_dirty() == 8
    n = len(port.pushes)
    assert t.flush_dirty() == 0
    assert len(port.pushes) == n


def test_zero_dirty_pages_no_traffic(make_table):
    t, port = make_table()
    r = add_region(t, port, 1, 16)
    t.flush_dirty()
    port.pushes.clear()
    t.read(r.base, 10)
    assert t.flush_dirty() == 0
    assert port.pushes == []


def test_write_fault_fetches_page_first(make_table):
    t, port = make_table()
    r = add_region(t, port, 1, 16)
    t.flush_dirty()
    port.real[1][:] = 5
    t.write(r.base + 2 * PS + 1, b"\x09")
    got = t.read(r.base + 2 * PS, 3)
    assert got.tolist() == [5, 9, 5]
    assert r.dirty.tolist() == [p == 2 for p in range(16)]
    t.check_invariants(platform=True)


def test_coarse_write_marks_region_dirty(make_table):
    t, port = make_table(coarse_write=True)
    r = add_region(t, port, 1, 16)
    t.flush_dirty()
    t.write(r.base + PS, b"z")
    assert r.dirty.all() and (r.prot == RW).all()
    port.pushes.clear()
    t.flush_dirty()
    assert port.pushes == [(1, 0, 16 * PS)]


def test_drain_to_shadow(make_table):
    t, port = make_table()
    a = add_region(t, port, 1, 12)
    b = add_region(t, port, 2, 3)
    t.flush_dirty()
    port.real[1][:] = 1
    port.real[2][:] = 2
    t.drain_to_shadow()
    for r in (a, b):
        assert r.phase is Phase.READ_PHASE and (r.prot == RO).all() and not r.dirty.any()
        assert np.array_equal(r.mem, port.real[r.real_region])
    t.check_invariants(platform=True)


def test_drain_empty_table(make_table):
    t, port = make_table()
    t.drain_to_shadow()
    assert port.fetches == []


# -- verified mode -------------------------------------------------------------------


def test_verified_write_then_read_other_page(make_table):
    t, port = make_table(Mode.VERIFIED)
    r = add_region(t, port, 1, 4)
    t.flush_dirty()
    t.write(r.base, b"\1")
    with pytest.raises(CycleViolation):
        t.read(r.base + 2 * PS, 4)


def test_verified_read_after_write_from_read_phase(make_table):
    t, port = make_table(Mode.VERIFIED, small_region_pages=0)
    r = add_region(t, port, 1, 16)
    t.flush_dirty()
    t.read(r.base, 4 * PS)          # read phase
    t.write(r.base + 10 * PS, b"\1")  # write phase
    with pytest.raises(CycleViolation):
        t.read(r.base, 4)           # was readable, but the read phase is closed


def test_verified_single_open_write_page(make_table):
    t, port = make_table(Mode.VERIFIED)
    r = add_region(t, port, 1, 8)
    t.write(r.base, b"a" * (3 * PS))
    assert (r.prot == RW).sum() == 1
    assert r.dirty.all()
    t.check_invariants(platform=True)
    t.flush_dirty()
    assert bytes(port.real[1][:3 * PS]) == b"a" * (3 * PS)


def test_verified_cycle_respected_is_silent(make_table):
    t, port = make_table(Mode.VERIFIED)
    r = add_region(t, port, 1, 8)
    t.flush_dirty()
    t.read(r.base, 8 * PS)
    t.write(r.base + PS, b"x")
    t.write(r.base + 3 * PS, b"y")
    t.flush_dirty()
    assert t.read(r.base + PS, 1).tobytes() == b"x"


def test_verified_fresh_region_is_readable(make_table):
    t, port = make_table(Mode.VERIFIED)
    r = add_region(t, port, 1, 4)
    assert not t.read(r.base + 2 * PS, 8).any()     # no host store yet: allowed
    assert port.fetches == []
    t.check_invariants(platform=True)
    t.write(r.base, b"\1")
    with pytest.raises(CycleViolation):
        t.read(r.base + 2 * PS, 4)                  # was readable before the store


def test_verified_inflight_region(make_table):
    t, port = make_table(Mode.VERIFIED)
    r = add_region(t, port, 1, 2)
    t.flush_dirty()
    port.inflight.add(1)
    with pytest.raises(CycleViolation):
        t.read(r.base, 1)


def test_normal_mode_write_then_read_passes(make_table):
    t, port = make_table()
    r = add_region(t, port, 1, 4)
    t.flush_dirty()
    t.write(r.base, b"\1")
    t.read(r.base + 2 * PS, 4)


# -- randomized protocol check against a plain-array oracle ------------------------

_op = st.one_of(
    st.tuples(st.just("read"), st.integers(0, 2), st.integers(0, 20 * PS), st.integers(1, 3 * PS)),
    st.tuples(st.just("write"), st.integers(0, 2), st.integers(0, 20 * PS), st.integers(1, 3 * PS)),
    st.tuples(st.just("kernel"), st.integers(0, 2), st.integers(0, 2), st.floats(-2, 2, width=32)),
)


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(sizes=st.lists(st.integers(1, 20), min_size=3, max_size=3), ops=st.lists(_op, max_size=30),
       small=st.sampled_from([0, 8]))
def test_random_programs_match_oracle(make_table, sizes, ops, small):
    t, port = make_table(small_region_pages=small)
    regs = [add_region(t, port, i + 1, n) for i, n in enumerate(sizes)]
    oracle = [np.zeros(n * PS, dtype=np.uint8) for n in sizes]
    rng = np.random.default_rng(len(ops))
    for kind, i, a, b in ops:
        r = regs[i]
        if kind in ("read", "write"):
            off = a % r.length
            n = min(b, r.length - off)
            if kind == "read":
                assert np.array_equal(t.read(r.base + off, n), oracle[i][off:off + n])
            else:
                data = rng.integers(0, 256, n, dtype=np.uint8)
                t.write(r.base + off, data)
                oracle[i][off:off + n] = data
        else:
            t.flush_dirty()
            j = a
            with np.errstate(all="ignore"):     # random bytes include inf/nan patterns
                kernels.run("saxpy", [port.real[i + 1], port.real[j + 1]], [float(b)])
                kernels.run("saxpy", [oracle[i], oracle[j]], [float(b)])
        t.check_invariants(platform=True)
    t.flush_dirty()
    for i in range(3):
        assert np.array_equal(port.real[i + 1], oracle[i])
