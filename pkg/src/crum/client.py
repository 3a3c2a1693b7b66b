"""Application-side runtime: the accelerator API every application calls.

A :class:`Session` forwards calls to the proxy over the shared call ring,
keeps managed memory coherent through shadow pages, logs state-creating
calls for replay, and services checkpoint requests at API entry.

Typical use::

    s = crum_init()
    a = s.malloc_managed(4096)
    a.array(np.float32)[:] = 1.0
    s.launch("scale", [a], [2.0])
    s.synchronize()
    print(a.array(np.float32)[:4])
"""

import enum
import os
import struct
import threading

import numpy as np

from . import _sys
from .api import BY_NAME, OPS, pack_launch
from .device import Kind
from .errors import (
    ChannelClosed,
    CrumError,
    InvalidArgument,
    NoProxy,
    RestoreFailed,
    SessionStateError,
    WrongThread,
)
from .image import Record
from .shadow import DEFAULT_SMALL_REGION_PAGES, Mode, ShadowTable
from .wire import (
    BULK_SINGLE_COPY,
    STATE_READY,
    ClientChannel,
    ControlArea,
    SharedRegion,
)

DEFAULT_SHADOW_BASE = 0x200000000000


def shadow_base_from_env():
    return int(os.environ.get("CRUM_SHADOW_BASE", hex(DEFAULT_SHADOW_BASE)), 0)


class State(enum.Enum):
    RUNNING = "running"
    QUIESCED = "quiesced"
    DETACHED = "detached"
    CLOSED = "closed"


# -- remote stubs ------------------------------------------------------------------


class Remote:
    """Typed call stubs, one per :data:`crum.api.OPS` entry (built below)."""

    def __init__(self, chan):
        self.chan = chan

    def launch(self, payload):
        self.chan.send(_LAUNCH, payload)


_LAUNCH = BY_NAME["LAUNCH"].code


def _make_stub(op):
    code = op.code
    args = op.arg_struct if op.args else None
    res = op.result_struct if op.result else None
    if not op.blocking:
        def stub(self, *a):
            self.chan.send(code, args.pack(*a) if args else b"")
    elif res is None:
        def stub(self, *a, bulk_len=0):
            self.chan.call(code, args.pack(*a) if args else b"", bulk_len)
    else:
        def stub(self, *a, bulk_len=0):
            out = res.unpack_from(self.chan.call(code, args.pack(*a) if args else b"", bulk_len))
            return out if len(out) > 1 else out[0]
    stub.__name__ = op.method
    stub.__doc__ = f"{op.name} ({'blocking' if op.blocking else 'pipelined'})"
    return stub


for _op in OPS:
    if _op.name != "LAUNCH":
        setattr(Remote, _op.method, _make_stub(_op))
del _op


class ReplayLog(list):
    """Ordered state-creating calls with their results."""

    def counts(self):
        out = {}
        for r in self:
            out[r.op] = out.get(r.op, 0) + 1
        return out


# -- handles -------------------------------------------------------------------------


class DeviceBuffer:
    """A DEVICE-kind allocation; only reachable through memcpy."""

    def __init__(self, session, region_id, length):
        self.session = session
        self.region_id = region_id
        self.length = length

    def __repr__(self):
        return f"DeviceBuffer(region={self.region_id}, length={self.length})"


class ManagedRegion:
    """A managed allocation as the application sees it: a shadow range."""

    def __init__(self, session, shadow):
        self.session = session
        self.shadow = shadow
        self.region_id = shadow.real_region
        self.address = shadow.base
        self.length = shadow.length

    def __index__(self):
        return self.address

    def __len__(self):
        return self.length

    def __repr__(self):
        return f"ManagedRegion(region={self.region_id}, address={self.address:#x}, length={self.length})"

    def read(self, offset=0, nbytes=None):
        """Copy of ``nbytes`` at ``offset`` (uint8 array)."""
        if nbytes is None:
            nbytes = self.length - offset
        return self.session.shadows.read(self.address + offset, nbytes)

    def write(self, offset, data):
        self.session.shadows.write(self.address + offset, data)

    def array(self, dtype=np.uint8):
        return TrackedArray(self, dtype)

    def view(self, dtype=np.uint8):
        """Read-only array over the whole shadow, valid until the next device call."""
        v = self.session.shadows.readable_view(self.shadow)
        n = len(v) // np.dtype(dtype).itemsize
        return v[:n * np.dtype(dtype).itemsize].view(dtype)


class TrackedArray:
    """Typed element access to a managed region; every access goes through fault tracking."""

    def __init__(self, region, dtype):
        self.region = region
        self.dtype = np.dtype(dtype)
        self.size = region.length // self.dtype.itemsize
        self.shape = (self.size,)

    def __len__(self):
        return self.size

    def _span(self, key):
        if isinstance(key, slice):
            start, stop, step = key.indices(self.size)
            if step != 1:
                raise IndexError("only contiguous slices are supported")
            return start, max(start, stop), False
        if key is Ellipsis:
            return 0, self.size, False
        i = int(key)
        if i < 0:
            i += self.size
        if not 0 <= i < self.size:
            raise IndexError(f"index {key} out of range for {self.size} elements")
        return i, i + 1, True

    def __getitem__(self, key):
        start, stop, scalar = self._span(key)
        w = self.dtype.itemsize
        out = self.region.read(start * w, (stop - start) * w).view(self.dtype)
        return out[0] if scalar else out

    def __setitem__(self, key, value):
        start, stop, _ = self._span(key)
        vals = np.broadcast_to(np.asarray(value, dtype=self.dtype), (stop - start,))
        self.region.write(start * self.dtype.itemsize, np.ascontiguousarray(vals))

    def to_numpy(self):
        return self[:]


# -- the session -----------------------------------------------------------------------


_IQQQ = struct.Struct("<IQQQ")
_open_session = None


class Session:
    """One application's connection to its proxy.

    Only the thread that created the session may call into it.
    """

    def __init__(self, region, mode=None, depth=None, coarse_write=None, small_region_pages=None,
                 shadow_base=None, owns_region=False):
        global _open_session
        if _open_session is not None and _open_session.state is not State.CLOSED:
            raise SessionStateError("a session is already open in this process")
        self.region = region
        self.owns_region = owns_region
        self.chan = ClientChannel(region, depth)
        self.remote = Remote(self.chan)
        self.control = ControlArea(region)
        self.bulk_mode = region.bulk_mode
        self.owner = threading.get_ident()
        self.state = State.DETACHED
        self.mode = Mode(mode or os.environ.get("CRUM_MODE", "normal"))
        self.shadow_base = shadow_base if shadow_base is not None else shadow_base_from_env()
        self._attach()
        if coarse_write is None:
            coarse_write = os.environ.get("CRUM_COARSE_WRITE", "0") not in ("", "0")
        if small_region_pages is None:
            small_region_pages = int(os.environ.get("CRUM_SMALL_REGION_PAGES",
                                                    DEFAULT_SMALL_REGION_PAGES))
        self.shadows = ShadowTable(self, self.page_size, self.mode, small_region_pages, coarse_write)
        self.replay = ReplayLog()
        self.managed = {}          # RegionId -> ManagedRegion
        self.device_buffers = {}   # RegionId -> DeviceBuffer
        self.streams = {0}
        self.events = set()
        self.inflight = set()      # regions named by launches since the last synchronize
        self.app_state = None
        self.restored_state = None
        self.ckpt_control = None   # seq of a control request awaiting a forked child
        from .ckpt import CkptTracker
        self.ckpt = CkptTracker()
        self._launch_cache = {}
        self.calls = 0
        _open_session = self

    # -- plumbing ------------------------------------------------------------------

    def _attach(self):
        pid, epoch, capacity, page_size = self.remote.attach(os.getpid())
        self.proxy_pid, self.epoch, self.capacity, self.page_size = pid, epoch, capacity, page_size
        self.state = State.RUNNING

    def _detach(self):
        self.remote.detach()
        self.state = State.DETACHED

    def _enter(self):
        if self.state is not State.RUNNING:
            raise SessionStateError(f"session is {self.state.value}")
        if threading.get_ident() != self.owner:
            raise WrongThread("a session may only be used by the thread that created it")
        self.calls += 1
        if self.control.has_request() or self.ckpt.child_pid:
            self._service()

    def _service(self):
        from . import ckpt
        ckpt.service_control(self)

    # shadow-table port: bulk moves between shadow pages and real pages
    def fetch(self, shadow, offset, length):
        self._bulk(BY_NAME["UVM_READ"].code, shadow.real_region, offset, length,
                   shadow.base + offset, True)

    def push(self, shadow, offset, length):
        self._bulk(BY_NAME["UVM_WRITE"].code, shadow.real_region, offset, length,
                   shadow.base + offset, False)

    def _bulk(self, code, rid, offset, length, addr, to_local):
        if self.bulk_mode == BULK_SINGLE_COPY:
            self.chan.call(code, _IQQQ.pack(rid, offset, length, addr), length)
            return
        scratch, size = self.region.scratch_addr, self.region.scratch_size
        pos = 0
        while pos < length:
            n = min(size, length - pos)
            if not to_local:
                _sys.memmove(scratch, addr + pos, n)
            self.chan.call(code, _IQQQ.pack(rid, offset + pos, n, 0), n)
            if to_local:
                _sys.memmove(addr + pos, scratch, n)
            pos += n

    # -- memory ------------------------------------------------------------------------

    def malloc_managed(self, length):
        """Allocate managed memory; returns its shadow as a :class:`ManagedRegion`."""
        self._enter()
        if length <= 0:
            raise InvalidArgument(f"allocation length must be positive, got {length}")
        rid, offset = self.remote.alloc(Kind.MANAGED, length)
        base = self.shadow_base + offset
        try:
            shadow = self.shadows.create_shadow(rid, length, base)
        except CrumError:
            self.remote.free(rid)
            raise
        self.replay.append(Record("ALLOC", Kind.MANAGED, rid, length, offset, base))
        m = ManagedRegion(self, shadow)
        self.managed[rid] = m
        return m

    def malloc_device(self, length):
        self._enter()
        if length <= 0:
            raise InvalidArgument(f"allocation length must be positive, got {length}")
        rid, offset = self.remote.alloc(Kind.DEVICE, length)
        self.replay.append(Record("ALLOC", Kind.DEVICE, rid, length, offset, 0))
        d = DeviceBuffer(self, rid, length)
        self.device_buffers[rid] = d
        return d

    def free(self, handle):
        self._enter()
        rid = _rid(handle)
        self.remote.free(rid)
        self.replay.append(Record("FREE", handle=rid))
        m = self.managed.pop(rid, None)
        if m is not None:
            self.shadows.remove(m.shadow)
        self.device_buffers.pop(rid, None)

    def memcpy_h2d(self, dst, src, offset=0):
        """Copy host bytes into a device allocation at ``offset``."""
        self._enter()
        buf = np.frombuffer(memoryview(src).cast("B"), dtype=np.uint8)
        if len(buf):
            self._bulk(BY_NAME["MEMCPY_H2D"].code, _rid(dst), offset, len(buf), buf.ctypes.data, False)

    def memcpy_d2h(self, src, nbytes=None, offset=0, out=None):
        """Copy device bytes to the host; returns a uint8 array."""
        self._enter()
        if nbytes is None:
            nbytes = (src.length if isinstance(src, DeviceBuffer) else 0) - offset
        if out is None:
            out = np.empty(nbytes, dtype=np.uint8)
        else:
            out = np.frombuffer(memoryview(out).cast("B"), dtype=np.uint8)[:nbytes]
        if nbytes:
            self._bulk(BY_NAME["MEMCPY_D2H"].code, _rid(src), offset, nbytes, out.ctypes.data, True)
        return out

    def read(self, address, nbytes):
        """Host read of managed memory by shadow address."""
        return self.shadows.read(int(address), nbytes)

    def write(self, address, data):
        self.shadows.write(int(address), data)

    # -- kernels, streams, events -----------------------------------------------------------

    def launch(self, kernel, regions=(), scalars=(), stream=0, grid=(1, 1)):
        """Queue a kernel; returns immediately (errors surface at the next flush)."""
        self._enter()
        if self.shadows._exposed:
            self.shadows.flush_dirty()
        rids = tuple(r if type(r) is int else _rid(r) for r in regions)
        key = (kernel, rids, tuple(scalars), stream, grid)
        payload = self._launch_cache.get(key)
        if payload is None:
            payload = pack_launch(stream, kernel, rids, [float(x) for x in scalars], grid)
            if len(self._launch_cache) >= 4096:
                self._launch_cache.clear()
            self._launch_cache[key] = payload
        if self.mode is Mode.VERIFIED:
            self.inflight.update(rids)
        self.chan.send(_LAUNCH, payload)

    def synchronize(self):
        self._enter()
        if self.shadows._exposed:
            self.shadows.flush_dirty()
        try:
            self.remote.synchronize()
        finally:
            self.inflight.clear()

    def flush(self):
        """Wait for every pipelined call; raises the first deferred error."""
        self._enter()
        self.chan.flush()

    def stream_create(self):
        self._enter()
        sid = self.remote.stream_create()
        self.replay.append(Record("STREAM_CREATE", handle=sid))
        self.streams.add(sid)
        return sid

    def stream_destroy(self, sid):
        self._enter()
        self.remote.stream_destroy(sid)
        self.replay.append(Record("STREAM_DESTROY", handle=sid))
        self.streams.discard(sid)

    def event_create(self):
        self._enter()
        eid = self.remote.event_create()
        self.replay.append(Record("EVENT_CREATE", handle=eid))
        self.events.add(eid)
        return eid

    def event_record(self, eid, stream=0):
        self._enter()
        self.remote.event_record(eid, stream)

    def event_query(self, eid):
        self._enter()
        return bool(self.remote.event_query(eid))

    def ping(self):
        self._enter()
        self.remote.ping()

    def state_dump(self, capacity=1 << 20):
        """The proxy's observable device state (allocations, streams, events, region hashes)."""
        import json
        self._enter()
        buf = bytearray(capacity)
        if self.bulk_mode == BULK_SINGLE_COPY:
            n = self.remote.state_dump(_sys.address_of(buf), capacity)
            data = bytes(buf[:n])
        else:
            n = self.remote.state_dump(0, min(capacity, self.region.scratch_size))
            data = bytes(self.region.scratch()[:n])
        return json.loads(data)

    # -- checkpoint / restart ---------------------------------------------------------------

    def set_app_state(self, blob):
        """Bytes (or a callable returning bytes) saved with every checkpoint."""
        self.app_state = blob

    def checkpoint(self, path, strategy="naive", **kw):
        from . import ckpt
        self._enter()
        return ckpt.checkpoint(self, path, strategy, **kw)

    def ckpt_status(self):
        from . import ckpt
        return ckpt.ckpt_status(self)

    def wait_checkpoint(self):
        from . import ckpt
        return ckpt.wait_child(self)

    def restore(self, path):
        """Rebuild this (fresh) session from an image."""
        from . import ckpt
        if self.state is not State.RUNNING:
            raise SessionStateError(f"session is {self.state.value}")
        return ckpt.restore_into(self, path)

    @property
    def stats(self):
        return self.shadows.stats

    def close(self, shutdown=False):
        """Finish any forked write, detach (or shut the proxy down) and unmap shadows."""
        global _open_session
        if self.state is State.CLOSED:
            return
        from . import ckpt
        try:
            if self.ckpt.child_pid:
                ckpt.wait_child(self)
                ckpt.service_control(self)
            if self.state is State.RUNNING:
                try:
                    self.chan.flush()
                except ChannelClosed:
                    pass
                except CrumError:
                    pass
                try:
                    if shutdown:
                        self.remote.shutdown()
                    else:
                        self._detach()
                except ChannelClosed:
                    pass
        finally:
            self.shadows.clear()
            self.state = State.CLOSED
            if _open_session is self:
                _open_session = None
            if self.owns_region:
                self.region.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _rid(handle):
    if isinstance(handle, (ManagedRegion, DeviceBuffer)):
        return handle.region_id
    return int(handle)


def current_session():
    return _open_session


def crum_init(**kw):
    """Attach to the proxy the launcher started; restore first if CRUM_RESTART is set."""
    name = os.environ.get("CRUM_SHM_NAME")
    if not name:
        raise NoProxy("CRUM_SHM_NAME is not set; start the application with `crum run`")
    try:
        region = SharedRegion.attach(name)
    except ChannelClosed as e:
        raise NoProxy(str(e)) from None
    if region.proxy_state != STATE_READY or not _sys.pid_alive(region.proxy_pid):
        region.close()
        raise NoProxy(f"no proxy is serving {name!r}")
    s = Session(region, owns_region=True, **kw)
    image = os.environ.get("CRUM_RESTART")
    if image:
        try:
            s.restore(image)
        except RestoreFailed:
            s.close()
            raise
        except CrumError as e:
            s.close()
            raise RestoreFailed(f"{e.code}: {e}") from e
    return s
