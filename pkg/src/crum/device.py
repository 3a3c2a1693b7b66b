"""Deterministic simulation of an accelerator device.

Only the proxy process ever holds a :class:`DeviceState`. The arena lives in
a memfd named ``crum-arena`` so its mapping is easy to spot in
``/proc/<pid>/maps`` when checking that the application never maps it.
"""

import hashlib
import mmap
import os
import time
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import kernels
from ._sys import PAGE_SIZE, address_of
from .errors import (
    AlreadyInitialized,
    InvalidArgument,
    NotInitialized,
    OutOfArena,
    RangeOutOfBounds,
    UnknownEvent,
    UnknownKernel,
    UnknownRegion,
    UnknownStream,
)

DEFAULT_ARENA_BYTES = 256 << 20
ARENA_NAME = "crum-arena"
DEFAULT_STREAM = 0


class Kind(IntEnum):
    DEVICE = 0
    MANAGED = 1


@dataclass
class Allocation:
    region_id: int
    offset: int
    length: int
    kind: Kind


@dataclass
class KernelTask:
    kernel_name: str
    region_args: list = field(default_factory=list)
    scalar_args: list = field(default_factory=list)
    grid: tuple = (1, 1)


@dataclass
class Event:
    recorded: bool = False
    stream: int = DEFAULT_STREAM
    complete: bool = False


def align_up(n, a):
    return (n + a - 1) // a * a


def arena_bytes_from_env():
    return int(os.environ.get("CRUM_ARENA_BYTES", DEFAULT_ARENA_BYTES))


def page_size_from_env():
    return int(os.environ.get("CRUM_PAGE_SIZE", PAGE_SIZE))


class DeviceState:
    """Memory arena, kernel streams and events of one device session.

    Allocation is a bump pointer that never reuses space, so the same call
    sequence always yields the same (region id, offset) pairs.
    """

    def __init__(self, capacity=None, page_size=None, epoch=1):
        self.capacity = capacity if capacity is not None else arena_bytes_from_env()
        self.page_size = page_size if page_size is not None else page_size_from_env()
        self.epoch = epoch
        self.initialized = True
        self.alloc_cursor = 0
        self.allocations = {}          # RegionId -> Allocation, insertion ordered
        self._region_count = 0
        self.streams = {DEFAULT_STREAM: deque()}
        self._stream_count = 0
        self._submitted = {DEFAULT_STREAM: 0}
        self.events = {}
        self._event_count = 0
        self._owed_us = 0.0
        self.kernels_executed = 0

        fd = os.memfd_create(ARENA_NAME)
        try:
            os.ftruncate(fd, self.capacity)
            self.arena = mmap.mmap(fd, self.capacity)
        finally:
            os.close(fd)
        self.mem = np.frombuffer(self.arena, dtype=np.uint8)
        self.base_addr = address_of(self.arena)

    # -- memory ---------------------------------------------------------

    def alloc(self, kind, length):
        kind = Kind(kind)
        if length <= 0:
            raise InvalidArgument(f"allocation length must be positive, got {length}")
        size = align_up(length, self.page_size)
        if self.alloc_cursor + size > self.capacity:
            raise OutOfArena(
                f"need {size} bytes at offset {self.alloc_cursor}, arena holds {self.capacity}")
        self._region_count += 1
        rid = self._region_count
        a = Allocation(rid, self.alloc_cursor, length, kind)
        self.allocations[rid] = a
        self.alloc_cursor += size
        return rid, a.offset

    def free(self, region_id):
        if self.allocations.pop(region_id, None) is None:
            raise UnknownRegion(f"region {region_id} is not live")

    def lookup(self, region_id):
        try:
            return self.allocations[region_id]
        except KeyError:
            raise UnknownRegion(f"region {region_id} is not live") from None

    def check_range(self, region_id, offset, length, kind=None):
        """Validate a byte range of a live region and return its arena offset."""
        a = self.lookup(region_id)
        if kind is not None and a.kind != kind:
            raise InvalidArgument(f"region {region_id} is {a.kind.name}, expected {Kind(kind).name}")
        if offset < 0 or length < 0 or offset + length > a.length:
            raise RangeOutOfBounds(
                f"range [{offset}, {offset + length}) outside region {region_id} of {a.length} bytes")
        return a.offset + offset

    def region_view(self, region_id):
        a = self.lookup(region_id)
        return self.mem[a.offset:a.offset + a.length]

    # -- streams and events ---------------------------------------------

    def stream_create(self):
        self._stream_count += 1
        sid = self._stream_count
        self.streams[sid] = deque()
        self._submitted[sid] = 0
        return sid

    def stream_destroy(self, sid):
        if sid == DEFAULT_STREAM or sid not in self.streams:
            raise UnknownStream(f"stream {sid} cannot be destroyed")
        if self.streams[sid]:
            self.synchronize()
        del self.streams[sid]

    def event_create(self):
        self._event_count += 1
        self.events[self._event_count] = Event()
        return self._event_count

    def event_record(self, eid, sid=DEFAULT_STREAM):
        ev = self._event(eid)
        self._stream(sid)
        ev.recorded, ev.stream, ev.complete = True, sid, False
        self._enqueue(sid, ("event", eid))

    def event_query(self, eid):
        return self._event(eid).complete

    def _event(self, eid):
        try:
            return self.events[eid]
        except KeyError:
            raise UnknownEvent(f"event {eid} does not exist") from None

    def _stream(self, sid):
        try:
            return self.streams[sid]
        except KeyError:
            raise UnknownStream(f"stream {sid} does not exist") from None

    # -- kernels ----------------------------------------------------------

    def launch(self, sid, task):
        self._stream(sid)
        spec = kernels.REGISTRY.get(task.kernel_name)
        if spec is None:
            raise UnknownKernel(f"no kernel named {task.kernel_name!r}")
        if len(task.region_args) != spec.n_regions or len(task.scalar_args) != spec.n_scalars:
            raise InvalidArgument(
                f"{task.kernel_name} takes {spec.n_regions} regions and {spec.n_scalars} scalars")
        blocks, threads = task.grid
        if blocks <= 0 or threads <= 0:
            raise InvalidArgument(f"grid must be positive, got {task.grid}")
        for rid in task.region_args:
            self.lookup(rid)
        self._enqueue(sid, task)

    def _enqueue(self, sid, item):
        self.streams[sid].append((self._submitted[sid], item))
        self._submitted[sid] += 1

    def pending(self):
        return sum(len(q) for q in self.streams.values())

    def synchronize(self):
        """Drain every stream, round-robin in ascending stream id, one task at a time.

        The first failing task is re-raised after the drain with ``stream`` and
        ``task_index`` attributes; later tasks still run.
        """
        first_error = None
        order = sorted(self.streams)
        while True:
            progressed = False
            for sid in order:
                q = self.streams.get(sid)
                if not q:
                    continue
                progressed = True
                index, item = q.popleft()
                try:
                    self._execute(item)
                except Exception as e:  # noqa: BLE001 - re-raised below
                    if first_error is None:
                        first_error = (sid, index, e)
            if not progressed:
                break
        self._pay_owed_time()
        if first_error is not None:
            sid, index, e = first_error
            err = type(e)(f"{e} (stream {sid}, task {index})")
            err.stream, err.task_index = sid, index
            raise err

    def _execute(self, item):
        if isinstance(item, tuple):
            self.events[item[1]].complete = True
            return
        views = [self.region_view(rid) for rid in item.region_args]
        self._owed_us += kernels.run(item.kernel_name, views, item.scalar_args)
        self.kernels_executed += 1

    def _pay_owed_time(self):
        if self._owed_us <= 0:
            return
        deadline = time.perf_counter() + self._owed_us * 1e-6
        self._owed_us = 0.0
        remaining = deadline - time.perf_counter()
        if remaining > 0:
            time.sleep(remaining)

    # -- inspection -------------------------------------------------------

    def snapshot(self):
        """Observable state used for deep comparisons across restarts."""
        return {
            "allocations": [
                (a.region_id, a.offset, a.length, int(a.kind)) for a in self.allocations.values()],
            "alloc_cursor": self.alloc_cursor,
            "streams": sorted(self.streams),
            "events": sorted(self.events),
            "region_sha256": {
                a.region_id: hashlib.sha256(self.region_view(a.region_id)).hexdigest()
                for a in self.allocations.values()},
        }

    def close(self):
        self.initialized = False
        self.mem = None
        try:
            self.arena.close()
        except BufferError:
            pass


class Driver:
    """Per-process driver library: one session, never re-initialised."""

    def __init__(self):
        self.state = None
        self._epochs = 0

    def init(self, capacity=None, page_size=None):
        if self._epochs:
            raise AlreadyInitialized("device session already initialized in this process")
        self._epochs += 1
        self.state = DeviceState(capacity, page_size, epoch=self._epochs)
        return self.state

    def require(self):
        if self.state is None:
            raise NotInitialized("device_init has not been called")
        return self.state


_driver = Driver()


def device_init(capacity=None, page_size=None):
    """Open the process's single device session; a second call always fails."""
    return _driver.init(capacity, page_size)
