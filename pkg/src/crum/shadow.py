"""Shadow pages: application-side mirrors of managed regions held by the proxy.

Each managed allocation gets a shadow region mapped at a deterministic
address in the application. Page protections are real (``mprotect``); an
access to a page whose protection does not allow it is a *fault*, resolved by
:meth:`ShadowTable.on_fault`:

* read fault   - fetch the page (and a prefetch window that doubles on every
  read fault of the same read phase) from the proxy, grant read-only;
* write fault  - grant read-write on the page and mark it dirty.

Before any device-visible call, :meth:`ShadowTable.flush_dirty` pushes dirty
pages to the proxy (one bulk transfer per contiguous run) and re-protects
every region, so the next host access faults again and sees device results.

Python code cannot resume from inside a SIGSEGV handler, so faults are
detected at the accessor boundary (:meth:`ShadowTable.read`,
:meth:`ShadowTable.write`) by consulting the same per-page protection table
that was handed to ``mprotect``. Touching a shadow page behind the table's
back still hits the real protection and crashes.
"""

import ctypes
import enum
import math
from dataclasses import dataclass

import numpy as np

from . import _sys
from .errors import (
    AddressUnavailable,
    CycleViolation,
    MapFailed,
    NotShadowAddress,
    Overlap,
    RangeOutOfBounds,
)

NONE, RO, RW = 0, 1, 2
_PROT = {NONE: _sys.PROT_NONE, RO: _sys.PROT_READ, RW: _sys.PROT_RW}
_PERMS = {"---": NONE, "r--": RO, "rw-": RW}

DEFAULT_SMALL_REGION_PAGES = 8


class Phase(enum.Enum):
    PROTECTED = "protected"
    READ_PHASE = "read"
    WRITE_PHASE = "write"


class Access(enum.Enum):
    READ = "read"
    WRITE = "write"


class Mode(enum.Enum):
    NORMAL = "normal"
    VERIFIED = "verified"


@dataclass
class ShadowStats:
    read_faults: int = 0
    write_faults: int = 0
    pages_fetched: int = 0
    pages_flushed: int = 0
    fetch_ops: int = 0
    push_ops: int = 0
    bytes_fetched: int = 0
    bytes_pushed: int = 0

    @property
    def faults(self):
        return self.read_faults + self.write_faults

    @property
    def bulk_bytes(self):
        return self.bytes_fetched + self.bytes_pushed


def page_runs(mask):
    """[(first, count), ...] for each run of True in a boolean page mask."""
    if not mask.any():
        return []
    edges = np.diff(np.concatenate(([0], mask.astype(np.int8), [0])))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return list(zip(starts.tolist(), (ends - starts).tolist()))


class ShadowRegion:
    def __init__(self, base, real_region, length, page_size):
        self.base = base
        self.real_region = real_region
        self.length = length
        self.page_size = page_size
        self.npages = max(1, -(-length // page_size))
        self.mapped_length = self.npages * page_size
        self.phase = Phase.WRITE_PHASE
        self.prot = np.full(self.npages, RW, dtype=np.uint8)
        self.dirty = np.ones(self.npages, dtype=bool)
        self.valid = np.ones(self.npages, dtype=bool)
        self.prefetch_window = 1
        self.open_write_page = None
        # a host store happened since the last device call (fresh contents do not count)
        self.host_written = False
        self.mem = np.ctypeslib.as_array((ctypes.c_uint8 * self.mapped_length).from_address(base))

    @property
    def end(self):
        return self.base + self.mapped_length

    @property
    def window_cap(self):
        return 1 << math.ceil(math.log2(self.npages)) if self.npages > 1 else 1

    def page_of(self, addr):
        return (addr - self.base) // self.page_size

    def set_prot(self, first, count, state):
        ps = self.page_size
        _sys.protect(self.base + first * ps, count * ps, _PROT[state])
        self.prot[first:first + count] = state

    def byte_span(self, first, count):
        """(offset, length) of a page run, clipped to the logical length."""
        off = first * self.page_size
        return off, min(count * self.page_size, self.length - off)

    def __repr__(self):
        return (f"ShadowRegion(base={self.base:#x}, region={self.real_region}, "
                f"length={self.length}, phase={self.phase.name})")


class ShadowTable:
    """All shadow regions of one session plus the fault-resolution logic.

    ``port`` moves bytes between shadow memory and the proxy's real pages:
    ``port.fetch(region, offset, length)`` fills the shadow range from the
    proxy and ``port.push(region, offset, length)`` sends it there.
    """

    def __init__(self, port, page_size=_sys.PAGE_SIZE, mode=Mode.NORMAL,
                 small_region_pages=DEFAULT_SMALL_REGION_PAGES, coarse_write=False):
        if page_size % _sys.PAGE_SIZE:
            raise ValueError(f"page size {page_size} is not a multiple of {_sys.PAGE_SIZE}")
        self.port = port
        self.page_size = page_size
        self.mode = Mode(mode)
        self.small_region_pages = small_region_pages
        self.coarse_write = coarse_write and self.mode is Mode.NORMAL
        self.regions = {}          # base -> ShadowRegion
        self._bases = []           # sorted
        self._exposed = set()      # bases of regions not in PROTECTED
        self.stats = ShadowStats()
        self.installed = True

    # -- table -------------------------------------------------------------

    def create_shadow(self, real_region, length, base, fill=None):
        """Map a new shadow region at ``base``: writable, every page dirty."""
        if length <= 0:
            raise ValueError("shadow length must be positive")
        npages = -(-length // self.page_size)
        end = base + npages * self.page_size
        i = np.searchsorted(self._bases, base)
        if (i > 0 and self.regions[self._bases[i - 1]].end > base) or \
                (i < len(self._bases) and self._bases[i] < end):
            raise Overlap(f"shadow range {base:#x}+{length} overlaps an existing region")
        try:
            _sys.map_fixed(base, npages * self.page_size)
        except OSError as e:
            cls = AddressUnavailable if e.errno == 17 else MapFailed
            raise cls(f"cannot map shadow at {base:#x}: {e.strerror}") from e
        r = ShadowRegion(base, real_region, length, self.page_size)
        if fill is not None:
            r.mem[:len(fill)] = np.frombuffer(fill, dtype=np.uint8)
        if self.mode is Mode.VERIFIED:
            # every access faults so the cycle can be checked; pages stay dirty
            r.set_prot(0, r.npages, NONE)
        self.regions[base] = r
        self._bases.insert(int(i), base)
        self._exposed.add(base)
        return r

    def remove(self, region):
        del self.regions[region.base]
        self._bases.remove(region.base)
        self._exposed.discard(region.base)
        region.mem = None
        _sys.unmap(region.base, region.mapped_length)

    def clear(self):
        for r in list(self.regions.values()):
            self.remove(r)

    def lookup(self, addr):
        i = np.searchsorted(self._bases, addr, side="right") - 1
        if i < 0:
            return None
        r = self.regions[self._bases[i]]
        return r if addr < r.end else None

    def __iter__(self):
        return (self.regions[b] for b in self._bases)

    def __len__(self):
        return len(self._bases)

    # -- transfers -----------------------------------------------------------

    def _fetch(self, r, first, count):
        """Fill pages from the proxy; leaves them read-write (caller narrows)."""
        r.set_prot(first, count, RW)
        off, length = r.byte_span(first, count)
        self.port.fetch(r, off, length)
        r.valid[first:first + count] = True
        self.stats.fetch_ops += 1
        self.stats.pages_fetched += count
        self.stats.bytes_fetched += length

    def _push(self, r, first, count):
        if (r.prot[first:first + count] == NONE).any():
            r.set_prot(first, count, RO)
        off, length = r.byte_span(first, count)
        self.port.push(r, off, length)
        self.stats.push_ops += 1
        self.stats.pages_flushed += count
        self.stats.bytes_pushed += length

    # -- fault resolution ------------------------------------------------------

    def on_fault(self, addr, access):
        r = self.lookup(addr)
        if r is None:
            raise NotShadowAddress(f"fault at {addr:#x} is outside every shadow region")
        page = r.page_of(addr)
        if self.mode is Mode.VERIFIED and r.real_region in getattr(self.port, "inflight", ()):
            raise CycleViolation(
                f"host {Access(access).value} of region {r.real_region} while a launched kernel "
                f"using it has not been synchronized")
        self._exposed.add(r.base)
        if Access(access) is Access.READ:
            self._read_fault(r, page)
        else:
            self._write_fault(r, page)

    def _read_fault(self, r, page):
        self.stats.read_faults += 1
        if r.prot[page] != NONE:
            return
        if r.phase is Phase.WRITE_PHASE:
            if self.mode is Mode.VERIFIED:
                if r.host_written:
                    raise CycleViolation(
                        f"read of page {page} of region {r.real_region} after writes with no "
                        f"intervening device call")
                if r.valid[page]:
                    # fresh or restored contents are already here
                    r.set_prot(page, 1, RO)
                    return
        elif r.phase is Phase.PROTECTED:
            r.phase = Phase.READ_PHASE
            r.prefetch_window = 1
        if r.npages <= self.small_region_pages:
            runs = page_runs(r.prot == NONE)
        else:
            count = min(r.prefetch_window, r.npages - page)
            # never overwrite pages that are already accessible (possibly dirty)
            open_pages = np.flatnonzero(r.prot[page:page + count] != NONE)
            if open_pages.size:
                count = int(open_pages[0])
            runs = [(page, count)]
            r.prefetch_window = min(r.prefetch_window * 2, r.window_cap)
        for first, count in runs:
            self._fetch(r, first, count)
            r.set_prot(first, count, RO)

    def _write_fault(self, r, page):
        self.stats.write_faults += 1
        if self.mode is Mode.VERIFIED:
            if r.phase is not Phase.WRITE_PHASE or not r.host_written:
                # the read phase is over: any later read of this region must fault
                readable = r.prot == RO
                for first, count in page_runs(readable):
                    r.set_prot(first, count, NONE)
            elif r.open_write_page is not None and r.open_write_page != page:
                r.set_prot(r.open_write_page, 1, NONE)
        if self.coarse_write:
            for first, count in page_runs(~r.valid):
                self._fetch(r, first, count)
            r.set_prot(0, r.npages, RW)
            r.dirty[:] = True
        else:
            if not r.valid[page]:
                self._fetch(r, page, 1)
            r.set_prot(page, 1, RW)
            r.dirty[page] = True
        r.phase = Phase.WRITE_PHASE
        r.host_written = True
        if self.mode is Mode.VERIFIED:
            r.open_write_page = page

    # -- protocol hooks -----------------------------------------------------------

    def has_dirty_pages(self):
        return any(self.regions[b].dirty.any() for b in self._exposed)

    def flush_dirty(self):
        """Send dirty pages to the proxy and re-protect every region.

        Returns the number of pages sent.
        """
        if not self._exposed:
            return 0
        sent = 0
        for base in sorted(self._exposed):
            r = self.regions[base]
            if r.dirty.any():
                for first, count in page_runs(r.dirty):
                    self._push(r, first, count)
                    sent += count
                r.dirty[:] = False
            r.set_prot(0, r.npages, NONE)
            r.valid[:] = False
            r.phase = Phase.PROTECTED
            r.prefetch_window = 1
            r.open_write_page = None
            r.host_written = False
        self._exposed.clear()
        return sent

    def drain_to_shadow(self):
        """Copy every region's full contents from the proxy; leave all pages readable."""
        if self.has_dirty_pages():
            self.flush_dirty()
        for r in self:
            self._fetch(r, 0, r.npages)
            r.set_prot(0, r.npages, RO)
            r.phase = Phase.READ_PHASE
            r.prefetch_window = 1
            r.open_write_page = None
            r.host_written = False
            self._exposed.add(r.base)

    def load_and_mark_dirty(self, r, data):
        """Restore path: place payload bytes in the shadow and mark every page dirty."""
        r.set_prot(0, r.npages, RW)
        r.mem[:len(data)] = np.frombuffer(data, dtype=np.uint8)
        if self.mode is Mode.VERIFIED:
            r.set_prot(0, r.npages, NONE)
        r.dirty[:] = True
        r.valid[:] = True
        r.phase = Phase.WRITE_PHASE
        self._exposed.add(r.base)

    # -- host accesses -------------------------------------------------------------

    def _locate(self, addr, nbytes):
        r = self.lookup(addr)
        if r is None:
            raise NotShadowAddress(f"address {addr:#x} is not in a shadow region")
        if nbytes < 0 or addr + nbytes > r.base + r.length:
            raise RangeOutOfBounds(
                f"access {addr:#x}+{nbytes} runs past region end {r.base + r.length:#x}")
        return r

    def _ensure(self, r, first, last, access):
        need = RW if access is Access.WRITE else RO
        while True:
            seg = r.prot[first:last + 1]
            bad = np.flatnonzero(seg < need) if need == RW else np.flatnonzero(seg == NONE)
            if not bad.size:
                return
            p = first + int(bad[0])
            self.on_fault(r.base + p * r.page_size, access)
            first = p

    def read(self, addr, nbytes):
        """Host read of shadow memory; returns a copy."""
        r = self._locate(addr, nbytes)
        if nbytes == 0:
            return np.empty(0, dtype=np.uint8)
        off = addr - r.base
        self._ensure(r, off // r.page_size, (off + nbytes - 1) // r.page_size, Access.READ)
        return r.mem[off:off + nbytes].copy()

    def write(self, addr, data):
        """Host write of shadow memory."""
        src = np.frombuffer(memoryview(data).cast("B"), dtype=np.uint8)
        r = self._locate(addr, len(src))
        if not len(src):
            return
        off = addr - r.base
        ps = r.page_size
        if self.mode is Mode.VERIFIED:
            # one writable page at a time: store page by page
            pos = 0
            while pos < len(src):
                p = (off + pos) // ps
                chunk = min(len(src) - pos, (p + 1) * ps - (off + pos))
                self._ensure(r, p, p, Access.WRITE)
                r.mem[off + pos:off + pos + chunk] = src[pos:pos + chunk]
                pos += chunk
            return
        self._ensure(r, off // ps, (off + len(src) - 1) // ps, Access.WRITE)
        r.mem[off:off + len(src)] = src

    def readable_view(self, r):
        """Fault the whole region in for reading and return a read-only array over it.

        Valid only until the next device-visible call re-protects the region.
        """
        if r.prot.min() == NONE:
            self._ensure(r, 0, r.npages - 1, Access.READ)
        v = r.mem[:r.length]
        v = v.view()
        v.flags.writeable = False
        return v

    # -- introspection --------------------------------------------------------------

    def platform_protections(self, r):
        """Per-page protection states as reported by /proc/self/maps."""
        out = np.full(r.npages, 255, dtype=np.uint8)
        for line in _sys.memory_map_lines():
            span, perms = line.split()[:2]
            lo, hi = (int(x, 16) for x in span.split("-"))
            if hi <= r.base or lo >= r.end:
                continue
            a = (max(lo, r.base) - r.base) // r.page_size
            b = (min(hi, r.end) - r.base) // r.page_size
            out[a:b] = _PERMS.get(perms[:3], 255)
        return out

    def check_invariants(self, platform=False):
        """Assert every region's phase, protections and bitmaps agree."""
        for r in self:
            if r.phase is Phase.PROTECTED:
                assert not r.prot.any(), f"{r}: protected region has accessible pages"
                assert not r.dirty.any(), f"{r}: protected region has dirty pages"
            elif r.phase is Phase.READ_PHASE:
                assert not (r.prot == RW).any(), f"{r}: writable page in read phase"
                assert not r.dirty.any(), f"{r}: dirty page in read phase"
            else:
                if self.mode is Mode.NORMAL:
                    assert (r.dirty[r.prot == RW]).all(), f"{r}: writable page not marked dirty"
                else:
                    assert (r.prot == RW).sum() <= 1, f"{r}: more than one writable page"
            assert not (r.prot[~r.valid] != NONE).any(), f"{r}: accessible page holds stale data"
            assert r.prefetch_window <= r.window_cap
            if platform:
                seen = self.platform_protections(r)
                assert (seen == r.prot).all(), f"{r}: kernel protections disagree with table"
