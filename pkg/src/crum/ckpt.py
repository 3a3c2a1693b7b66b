"""Checkpoint and restart of a session.

Every checkpoint starts with the same pause phase: wait for pipelined calls,
synchronize the device, send dirty shadow pages, copy every managed region
back into its shadow and every device region into host memory, then detach
from the proxy. What follows depends on the strategy:

* naive / gzip / pgzip / lz4 write the image in-line and reattach, so the
  application is paused for the whole write;
* forked duplicates the process copy-on-write right after the drain. The
  child writes the image from its inherited memory and exits; the parent
  reattaches at once and carries on.

Restore replays the allocation log against a fresh proxy, checking that each
call returns exactly what it returned originally, then loads the payloads.
"""

import enum
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .device import Kind, align_up
from .errors import (
    AddressUnavailable,
    ChannelClosed,
    ConcurrentCheckpoint,
    CrumError,
    DrainFailed,
    InvalidArgument,
    LiveDeviceAllocations,
    MapFailed,
    ReplayDivergence,
    RestoreFailed,
    WriteFailed,
)
from .image import (
    CODEC_DEFLATE,
    CODEC_LZ4,
    CODEC_NAMES,
    CODEC_RAW,
    ImageContent,
    RegionEntry,
    Throttle,
    read_image,
    throttle_from_env,
    write_image,
)


class CkptKind(enum.Enum):
    NAIVE = "naive"
    COMPRESS = "compress"
    FORKED = "forked"


# strategy name -> (kind, codec, workers)
STRATEGIES = {
    "naive": (CkptKind.NAIVE, CODEC_RAW, 1),
    "gzip": (CkptKind.COMPRESS, CODEC_DEFLATE, 1),
    "pgzip": (CkptKind.COMPRESS, CODEC_DEFLATE, 0),     # 0: one worker per processing unit
    "lz4": (CkptKind.COMPRESS, CODEC_LZ4, 1),
    "forked": (CkptKind.FORKED, CODEC_RAW, 1),
}


@dataclass
class CkptReport:
    strategy: str
    path: str
    codec: int
    pause_time: float
    total_time: float = None
    image_bytes: int = 0
    payload_bytes: int = 0
    drain_time: float = 0.0
    fork_time: float = 0.0
    write_time: float = 0.0
    status: str = "done"          # done | running | failed
    error: str = None
    detail: str = ""


@dataclass
class CkptStatus:
    state: str                    # idle | child_running | last_result
    report: CkptReport = None


class CkptTracker:
    """Per-session bookkeeping of the forked writer."""

    def __init__(self):
        self.child_pid = 0
        self.fd = -1
        self.started = 0.0
        self.report = None
        self.last = None


def resolve_strategy(strategy, codec=None, workers=None):
    try:
        kind, dcodec, dworkers = STRATEGIES[strategy]
    except KeyError:
        raise InvalidArgument(f"unknown strategy {strategy!r}; "
                              f"choose from {', '.join(STRATEGIES)}") from None
    if codec is not None:
        dcodec = CODEC_NAMES[codec] if isinstance(codec, str) else int(codec)
    if workers is not None:
        dworkers = workers
    if dworkers == 0:
        dworkers = os.cpu_count() or 1
    return kind, dcodec, dworkers


# -- pause phase -----------------------------------------------------------------


def _stage(session):
    """Drain device and proxy into this process; returns (content, drain seconds)."""
    from .client import State
    t = time.perf_counter()
    session.state = State.QUIESCED
    try:
        session.chan.flush()
        session.remote.synchronize()
        session.inflight.clear()
        session.shadows.flush_dirty()
        session.shadows.drain_to_shadow()
        _check_device_allocations(session)
        regions = []
        for rid in sorted(set(session.managed) | set(session.device_buffers)):
            if rid in session.managed:
                m = session.managed[rid]
                regions.append(RegionEntry(rid, Kind.MANAGED, m.length, m.address,
                                           m.shadow.mem[:m.length]))
            else:
                d = session.device_buffers[rid]
                host = np.empty(d.length, dtype=np.uint8)
                session._bulk(_code("MEMCPY_D2H"), rid, 0, d.length, host.ctypes.data, True)
                regions.append(RegionEntry(rid, Kind.DEVICE, d.length, 0, host))
    except ChannelClosed:
        session.state = State.RUNNING
        raise
    except CrumError as e:
        session.state = State.RUNNING
        raise DrainFailed(f"cannot quiesce: {e.code}: {e}") from e
    blob = session.app_state() if callable(session.app_state) else session.app_state
    content = ImageContent(session.page_size, session.capacity, session.mode.value,
                           list(session.replay), regions, bytes(blob or b""),
                           cursor=arena_cursor(session.replay, session.page_size),
                           streams=sorted(session.streams), events=sorted(session.events))
    return content, time.perf_counter() - t


def _check_device_allocations(session):
    # kernels cannot allocate, so every live allocation must be one the client made
    live = set()
    for r in session.replay:
        if r.op == "ALLOC":
            live.add(r.handle)
        elif r.op == "FREE":
            live.discard(r.handle)
    known = set(session.managed) | set(session.device_buffers)
    if live != known:
        raise LiveDeviceAllocations(f"allocations {sorted(live ^ known)} are not tracked by the client")


def _code(name):
    from .api import BY_NAME
    return BY_NAME[name].code


# -- checkpoint ----------------------------------------------------------------------


def checkpoint(session, path, strategy="naive", codec=None, workers=None, sync=True,
               throttle_mbps=None):
    """Checkpoint ``session`` to ``path``; returns a :class:`CkptReport`.

    For the forked strategy the report comes back with status ``running``;
    it is completed once the writer child is reaped (see :func:`ckpt_status`).
    """
    tracker = session.ckpt
    if tracker.child_pid and not poll_child(session):
        raise ConcurrentCheckpoint(f"forked checkpoint writer {tracker.child_pid} is still running")
    kind, codec, workers = resolve_strategy(strategy, codec, workers)
    throttle = throttle_from_env() if throttle_mbps is None else (
        Throttle(throttle_mbps) if throttle_mbps > 0 else None)
    t0 = time.perf_counter()
    content, drain = _stage(session)
    payload = sum(e.length for e in content.regions)
    session._detach()

    if kind is not CkptKind.FORKED:
        try:
            tw = time.perf_counter()
            nbytes = write_image(path, content, codec, workers, throttle, sync)
            tw = time.perf_counter() - tw
        finally:
            session._attach()
        elapsed = time.perf_counter() - t0
        report = CkptReport(strategy, path, codec, elapsed, elapsed, nbytes, payload, drain,
                            write_time=tw)
        tracker.last = report
        return report

    rfd, wfd = os.pipe()
    tf = time.perf_counter()
    pid = os.fork()
    if pid == 0:
        os.close(rfd)
        _child_main(session, wfd, path, content, codec, workers, throttle, sync)
    os.close(wfd)
    fork_time = time.perf_counter() - tf
    session._attach()
    report = CkptReport(strategy, path, codec, time.perf_counter() - t0, None, 0, payload, drain,
                        fork_time, status="running")
    tracker.child_pid, tracker.fd, tracker.started, tracker.report = pid, rfd, t0, report
    return report


def _child_main(session, wfd, path, content, codec, workers, throttle, sync):
    """Body of the forked writer; never returns."""
    code = 1
    try:
        # the child must hold nothing live: drop the inherited channel mapping
        try:
            session.region.close()
        except Exception:  # noqa: BLE001
            pass
        t = time.perf_counter()
        nbytes = write_image(path, content, codec, workers, throttle, sync)
        msg = {"ok": True, "bytes": nbytes, "write_time": time.perf_counter() - t,
               "finished": time.perf_counter()}
        code = 0
    except CrumError as e:
        msg = {"ok": False, "code": e.code, "detail": str(e), "finished": time.perf_counter()}
    except BaseException as e:  # noqa: BLE001 - reported through the pipe
        msg = {"ok": False, "code": "WriteFailed", "detail": f"{type(e).__name__}: {e}",
               "finished": time.perf_counter()}
    try:
        os.write(wfd, json.dumps(msg).encode())
    finally:
        os._exit(code)


def poll_child(session, block=False):
    """Reap the forked writer if it has finished; True when no child remains."""
    t = session.ckpt
    if not t.child_pid:
        return True
    pid, status = os.waitpid(t.child_pid, 0 if block else os.WNOHANG)
    if pid == 0:
        return False
    chunks = []
    while True:
        b = os.read(t.fd, 65536)
        if not b:
            break
        chunks.append(b)
    os.close(t.fd)
    try:
        msg = json.loads(b"".join(chunks) or b"{}")
    except ValueError:
        msg = {}
    rep = t.report
    finished = msg.get("finished", time.perf_counter())
    rep.total_time = max(rep.pause_time, finished - t.started)
    code = os.waitstatus_to_exitcode(status)
    if code == 0 and msg.get("ok"):
        rep.status = "done"
        rep.image_bytes = msg["bytes"]
        rep.write_time = msg["write_time"]
    else:
        rep.status = "failed"
        rep.error = msg.get("code", WriteFailed.__name__)
        rep.detail = msg.get("detail", f"writer exited with status {code}")
    t.child_pid, t.fd, t.report, t.last = 0, -1, None, rep
    return True


def wait_child(session):
    """Block until the forked writer is reaped; returns its report (or the last one)."""
    poll_child(session, block=True)
    return session.ckpt.last


def ckpt_status(session):
    if session.ckpt.child_pid and not poll_child(session):
        return CkptStatus("child_running", session.ckpt.report)
    if session.ckpt.last is None:
        return CkptStatus("idle")
    return CkptStatus("last_result", session.ckpt.last)


def service_control(session):
    """Handle launcher requests and publish finished forked results (called at API entry)."""
    ctl = session.control
    if session.ckpt.child_pid:
        poll_child(session)
    if session.ckpt_control is not None and not session.ckpt.child_pid:
        _publish(ctl, session.ckpt_control, session.ckpt.last)
        session.ckpt_control = None
    req = ctl.pending()
    if req is None:
        return
    seq, strategy, path = req
    ctl.acknowledge(seq)
    try:
        rep = checkpoint(session, path, strategy)
    except CrumError as e:
        ctl.publish(seq, 1, code=e.code)
        return
    if rep.status == "running":
        session.ckpt_control = seq
    else:
        _publish(ctl, seq, rep)


def _publish(ctl, seq, rep):
    if rep.status == "done":
        ctl.publish(seq, 0, rep.pause_time * 1e3, rep.total_time * 1e3, rep.image_bytes)
    else:
        ctl.publish(seq, 1, code=rep.error or "WriteFailed")


# -- restore ---------------------------------------------------------------------------


def arena_cursor(records, page_size):
    """Where the device's bump allocator stands after ``records``."""
    return max((r.offset + align_up(r.length, page_size) for r in records if r.op == "ALLOC"),
               default=0)


def restore_into(session, path):
    """Read ``path`` and rebuild ``session`` (fresh, attached to a fresh proxy) from it."""
    return restore_content(session, read_image(path))


def restore_content(session, content):
    from .client import DeviceBuffer, ManagedRegion
    if session.replay or len(session.shadows):
        raise RestoreFailed("restore needs a fresh session")
    if content.page_size != session.page_size:
        raise RestoreFailed(f"image page size {content.page_size}, proxy uses {session.page_size}")
    remote = session.remote
    for i, rec in enumerate(content.records):
        where = f"replay record {i} ({rec.op})"
        try:
            if rec.op == "ALLOC":
                rid, off = remote.alloc(rec.kind, rec.length)
                if (rid, off) != (rec.handle, rec.offset):
                    raise ReplayDivergence(
                        f"{where}: got region {rid} at offset {off}, "
                        f"recorded region {rec.handle} at offset {rec.offset}")
                if rec.kind == Kind.MANAGED:
                    addr = session.shadow_base + off
                    if addr != rec.address:
                        raise ReplayDivergence(
                            f"{where}: shadow address {addr:#x}, recorded {rec.address:#x}")
                    try:
                        shadow = session.shadows.create_shadow(rid, rec.length, addr)
                    except MapFailed as e:
                        raise AddressUnavailable(f"{where}: {e}") from e
                    session.managed[rid] = ManagedRegion(session, shadow)
                elif rec.kind == Kind.DEVICE:
                    session.device_buffers[rid] = DeviceBuffer(session, rid, rec.length)
                else:
                    raise ReplayDivergence(f"{where}: unknown allocation kind {rec.kind}")
            elif rec.op == "FREE":
                remote.free(rec.handle)
                m = session.managed.pop(rec.handle, None)
                if m is not None:
                    session.shadows.remove(m.shadow)
                session.device_buffers.pop(rec.handle, None)
            elif rec.op == "STREAM_CREATE":
                sid = remote.stream_create()
                if sid != rec.handle:
                    raise ReplayDivergence(f"{where}: got stream {sid}, recorded {rec.handle}")
                session.streams.add(sid)
            elif rec.op == "STREAM_DESTROY":
                remote.stream_destroy(rec.handle)
                session.streams.discard(rec.handle)
            elif rec.op == "EVENT_CREATE":
                eid = remote.event_create()
                if eid != rec.handle:
                    raise ReplayDivergence(f"{where}: got event {eid}, recorded {rec.handle}")
                session.events.add(eid)
        except (ReplayDivergence, AddressUnavailable):
            raise
        except CrumError as e:
            raise ReplayDivergence(f"{where} failed: {e.code}: {e}") from e
        session.replay.append(rec)

    live = {rid: (m.length, int(Kind.MANAGED), m.address) for rid, m in session.managed.items()}
    live.update({rid: (d.length, int(Kind.DEVICE), 0) for rid, d in session.device_buffers.items()})
    table = {e.region_id: (e.length, int(e.kind), e.address) for e in content.regions}
    if live != table:
        raise ReplayDivergence("region table does not match the allocations rebuilt by replay")
    if arena_cursor(session.replay, session.page_size) != content.cursor:
        raise ReplayDivergence("arena cursor after replay does not match the handle table")
    if sorted(session.streams) != sorted(content.streams):
        raise ReplayDivergence("live streams after replay do not match the handle table")
    if sorted(session.events) != sorted(content.events):
        raise ReplayDivergence("live events after replay do not match the handle table")

    for e in content.regions:
        if e.kind == Kind.MANAGED:
            session.shadows.load_and_mark_dirty(session.managed[e.region_id].shadow, e.data)
        else:
            buf = np.frombuffer(e.data, dtype=np.uint8)
            session._bulk(_code("MEMCPY_H2D"), e.region_id, 0, e.length, buf.ctypes.data, False)
    session.shadows.flush_dirty()
    session.restored_state = content.app_state
    return content
