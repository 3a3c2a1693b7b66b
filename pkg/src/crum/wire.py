"""Shared-memory transport between an application and its proxy.

One file under /dev/shm holds a fixed header, a power-of-two ring of
fixed-size call slots and an optional scratch buffer for the two-copy bulk
path. The ring is single-producer (application) / single-consumer (proxy).
Neither side ever takes a lock: the producer owns ``head``, the consumer owns
``tail`` and the reply/error areas, and waiting is spin-yield followed by a
futex sleep on a per-side doorbell word.

Header layout (little-endian, byte offsets)::

    0    u8   layout version
    1    u8   bulk mode (0 single-copy, 1 scratch)
    4    u32  ring slots
    8    u32  default pipeline depth
    12   u32  slot size
    16   u64  scratch offset
    24   u64  scratch size
    32   u32  proxy pid
    36   u32  client pid
    40   u32  proxy state (0 starting, 1 ready, 2 exited)
    64   u64  head: messages published by the client
    72   u32  proxy doorbell (futex)
    76   u32  proxy sleeping flag
    128  u64  tail: messages completed by the proxy
    136  u32  client doorbell (futex)
    140  u32  client sleeping flag
    144  u64  reply seq
    152  u32  reply status
    160  240B reply result
    512  u64  first deferred error seq (0 = none)
    520  u16  its opcode
    524  u32  its status
    528  200B its message
    768  u64  requests seen by proxy
    776  u64  replies written by proxy
    1024 u32  control request seq (written by the launcher)
    1028 u32  control ack seq (the application has taken the request)
    1032 16B  requested strategy
    1048 512B requested image path
    1600 8 x 64B control result slots, slot = seq % 8:
              u32 seq, i32 status (0 ok), f64 pause ms, f64 total ms,
              u64 image bytes, 32B error code
    4096 ...  ring slots, then scratch

Slot layout: u64 seq, u16 opcode, u8 blocking, 5 pad, u64 bulk_len, 240B payload.
"""

import errno
import mmap
import os
import struct
import time

from . import _sys
from .api import BY_CODE, PAYLOAD_BYTES
from .errors import (
    ChannelClosed,
    DeferredCallError,
    PartialTransfer,
    RemoteGone,
    VersionMismatch,
    from_status,
)

LAYOUT_VERSION = 1
HEADER_BYTES = 4096
SLOT = struct.Struct(f"<QHB5xQ{PAYLOAD_BYTES}s")
REPLY = struct.Struct(f"<QI4x{PAYLOAD_BYTES}s")
ERR = struct.Struct("<QH2xI200s")
DEFAULT_SLOTS = 64
DEFAULT_DEPTH = 64
DEFAULT_SCRATCH = 4 << 20

BULK_SINGLE_COPY = 0
BULK_SCRATCH = 1
BULK_MODES = {"single-copy": BULK_SINGLE_COPY, "scratch": BULK_SCRATCH}

STATE_STARTING, STATE_READY, STATE_EXITED = 0, 1, 2

# word indices into the u64 / u32 views of the header
_HEAD = 64 // 8
_TAIL = 128 // 8
_REQS = 768 // 8
_REPLIES = 776 // 8
_PROXY_PID = 32 // 4
_CLIENT_PID = 36 // 4
_PROXY_STATE = 40 // 4
_PROXY_BELL = 72 // 4
_PROXY_SLEEPING = 76 // 4
_CLIENT_BELL = 136 // 4
_CLIENT_SLEEPING = 140 // 4
_REPLY_OFF = 144
_ERR_OFF = 512

SPIN_YIELDS = 64
SLEEP_TIMEOUT = 0.05


def shm_path(name):
    return os.path.join("/dev/shm", name.lstrip("/"))


def default_shm_name(session_id):
    return f"crum-{session_id}"


class SharedRegion:
    """The mapped shared file plus typed views of its header words."""

    def __init__(self, name, mm, fd=None):
        self.name = name
        self.mm = mm
        self._fd = fd
        self.u64 = memoryview(mm).cast("Q")
        self.u32 = memoryview(mm).cast("I")
        self.base_addr = _sys.address_of(mm)
        self.version, self.bulk_mode = mm[0], mm[1]
        self.nslots, self.depth, self.slot_size = struct.unpack_from("<III", mm, 4)
        self.scratch_off, self.scratch_size = struct.unpack_from("<QQ", mm, 16)

    @classmethod
    def create(cls, name, nslots=DEFAULT_SLOTS, depth=DEFAULT_DEPTH, bulk_mode=BULK_SINGLE_COPY,
               scratch_size=DEFAULT_SCRATCH):
        if nslots & (nslots - 1):
            raise ValueError("ring slot count must be a power of two")
        nslots = max(nslots, 1 << (max(depth, 1) - 1).bit_length())
        scratch_off = HEADER_BYTES + nslots * SLOT.size
        scratch_off = (scratch_off + 4095) // 4096 * 4096
        size = scratch_off + (scratch_size if bulk_mode == BULK_SCRATCH else 0)
        fd = os.open(shm_path(name), os.O_RDWR | os.O_CREAT | os.O_EXCL, 0o600)
        try:
            os.ftruncate(fd, size)
            mm = mmap.mmap(fd, size)
        finally:
            os.close(fd)
        mm[0] = LAYOUT_VERSION
        mm[1] = bulk_mode
        struct.pack_into("<IIIQQ", mm, 4, nslots, depth, SLOT.size, scratch_off,
                         scratch_size if bulk_mode == BULK_SCRATCH else 0)
        return cls(name, mm)

    @classmethod
    def attach(cls, name):
        try:
            fd = os.open(shm_path(name), os.O_RDWR)
        except FileNotFoundError:
            raise ChannelClosed(f"shared region {name!r} does not exist") from None
        try:
            mm = mmap.mmap(fd, os.fstat(fd).st_size)
        finally:
            os.close(fd)
        if mm[0] != LAYOUT_VERSION:
            v = mm[0]
            mm.close()
            raise VersionMismatch(f"shared region layout version {v}, expected {LAYOUT_VERSION}")
        return cls(name, mm)

    @property
    def proxy_pid(self):
        return self.u32[_PROXY_PID]

    @property
    def client_pid(self):
        return self.u32[_CLIENT_PID]

    @property
    def proxy_state(self):
        return self.u32[_PROXY_STATE]

    def counters(self):
        """(published, completed, requests seen, replies written)."""
        return self.u64[_HEAD], self.u64[_TAIL], self.u64[_REQS], self.u64[_REPLIES]

    def scratch(self):
        return memoryview(self.mm)[self.scratch_off:self.scratch_off + self.scratch_size]

    @property
    def scratch_addr(self):
        return self.base_addr + self.scratch_off

    def addr(self, offset):
        return self.base_addr + offset

    def close(self):
        self.u64.release()
        self.u32.release()
        try:
            self.mm.close()
        except BufferError:
            pass

    def unlink(self):
        try:
            os.unlink(shm_path(self.name))
        except FileNotFoundError:
            pass


def _wait(region, pred, bell, sleeping, alive, timeout=None):
    """Wait until ``pred()``: yield first, then futex-sleep on ``bell``."""
    u32 = region.u32
    for _ in range(SPIN_YIELDS):
        if pred():
            return
        os.sched_yield()
    bell_addr = region.addr(bell * 4)
    deadline = None if timeout is None else time.monotonic() + timeout
    while True:
        v = u32[bell]
        u32[sleeping] = 1
        if pred():
            u32[sleeping] = 0
            return
        _sys.futex_wait(bell_addr, v, SLEEP_TIMEOUT)
        u32[sleeping] = 0
        if pred():
            return
        alive()
        if deadline is not None and time.monotonic() > deadline:
            raise TimeoutError("timed out waiting on shared channel")


def _ring(region, bell, sleeping):
    u32 = region.u32
    u32[bell] = (u32[bell] + 1) & 0xFFFFFFFF
    if u32[sleeping]:
        _sys.futex_wake(region.addr(bell * 4))


class ClientChannel:
    """Producer end of the call ring (lives in the application)."""

    def __init__(self, region, depth=None):
        self.region = region
        self.depth = depth or region.depth
        if self.depth > region.nslots:
            raise ValueError(f"depth {self.depth} exceeds ring size {region.nslots}")
        self.mask = region.nslots - 1
        self.mm = region.mm
        self.u64 = region.u64
        self.head = self.u64[_HEAD]
        self.sent = 0
        self.last_reply = None

    def _check_alive(self):
        if self.region.proxy_state == STATE_EXITED or not _sys.pid_alive(self.region.proxy_pid):
            raise ChannelClosed("proxy process is gone")

    def unreplied(self):
        return self.head - self.u64[_TAIL]

    def send(self, opcode, payload=b"", blocking=False, bulk_len=0):
        """Publish one call and return its seq; waits only for ring space."""
        if self.region.u32[_PROXY_STATE] == STATE_EXITED:
            raise ChannelClosed("proxy process has exited")
        u64 = self.u64
        if self.head - u64[_TAIL] >= self.depth:
            limit = self.head - self.depth
            _wait(self.region, lambda: u64[_TAIL] > limit, _CLIENT_BELL, _CLIENT_SLEEPING,
                  self._check_alive)
        seq = self.head + 1
        SLOT.pack_into(self.mm, HEADER_BYTES + (self.head & self.mask) * SLOT.size,
                       seq, opcode, blocking, bulk_len, payload)
        self.head = seq
        u64[_HEAD] = seq
        self.sent += 1
        _ring(self.region, _PROXY_BELL, _PROXY_SLEEPING)
        return seq

    def wait(self, seq):
        u64 = self.u64
        if u64[_TAIL] < seq:
            _wait(self.region, lambda: u64[_TAIL] >= seq, _CLIENT_BELL, _CLIENT_SLEEPING,
                  self._check_alive)

    def call(self, opcode, payload=b"", bulk_len=0):
        """Blocking call: flush the pipeline, send, wait, return the result area."""
        if self.head != self.u64[_TAIL] or self.u64[_ERR_OFF // 8]:
            self.flush()
        seq = self.send(opcode, payload, True, bulk_len)
        self.wait(seq)
        rseq, status, result = REPLY.unpack_from(self.mm, _REPLY_OFF)
        if rseq != seq:
            raise ChannelClosed(f"reply seq {rseq} does not match call seq {seq}")
        if status:
            raise from_status(status, result.rstrip(b"\0").decode(errors="replace"))
        return result

    def flush(self):
        """Wait for every sent call; raise the first deferred error, if any."""
        self.wait(self.head)
        eseq, eop, estatus, emsg = ERR.unpack_from(self.mm, _ERR_OFF)
        if eseq:
            self.u64[_ERR_OFF // 8] = 0
            raise DeferredCallError(eseq, eop, estatus, emsg.rstrip(b"\0").decode(errors="replace"))


class ProxyChannel:
    """Consumer end of the call ring (lives in the proxy)."""

    def __init__(self, region):
        self.region = region
        self.mm = region.mm
        self.u64 = region.u64
        self.mask = region.nslots - 1
        self.tail = self.u64[_TAIL]

    def announce(self, pid):
        self.region.u32[_PROXY_PID] = pid
        self.region.u32[_PROXY_STATE] = STATE_READY

    def mark_exited(self):
        self.region.u32[_PROXY_STATE] = STATE_EXITED
        _ring(self.region, _CLIENT_BELL, _CLIENT_SLEEPING)
        _sys.futex_wake(self.region.addr(_CLIENT_BELL * 4))

    def has_message(self):
        return self.u64[_HEAD] > self.tail

    def wait_message(self, alive):
        u64 = self.u64
        if u64[_HEAD] > self.tail:
            return
        tail = self.tail
        _wait(self.region, lambda: u64[_HEAD] > tail, _PROXY_BELL, _PROXY_SLEEPING, alive)

    def next_message(self):
        """(seq, opcode, blocking, bulk_len, payload) of the oldest unconsumed slot."""
        self.u64[_REQS] += 1
        return SLOT.unpack_from(self.mm, HEADER_BYTES + (self.tail & self.mask) * SLOT.size)

    def complete(self, seq, opcode, blocking, status=0, result=b"", msg=""):
        if blocking:
            if status:
                result = msg.encode(errors="replace")[:PAYLOAD_BYTES]
            REPLY.pack_into(self.mm, _REPLY_OFF, seq, status, result)
        elif status and not self.u64[_ERR_OFF // 8]:
            ERR.pack_into(self.mm, _ERR_OFF, seq, opcode, status,
                          msg.encode(errors="replace")[:200])
        self.u64[_REPLIES] += 1
        self.tail = seq
        self.u64[_TAIL] = seq
        _ring(self.region, _CLIENT_BELL, _CLIENT_SLEEPING)


class BulkChannel:
    """Address-space to address-space copies between the two processes.

    In single-copy mode every transfer is one ``process_vm_readv`` or
    ``process_vm_writev`` (retried only on a short count). In scratch mode the
    caller stages bytes through the shared scratch buffer instead and these
    methods are not used for the cross-process hop.
    """

    def __init__(self, mode=BULK_SINGLE_COPY, peer_pid=0):
        self.mode = mode
        self.peer_pid = peer_pid
        self.transfers = 0
        self.bytes = 0

    def _move(self, fn, local_addr, remote_addr, length):
        if length <= 0:
            raise ValueError("bulk transfer length must be positive")
        if not self.peer_pid:
            raise RemoteGone("no peer process attached")
        done = 0
        while done < length:
            try:
                n = fn(self.peer_pid, local_addr + done, remote_addr + done, length - done)
            except OSError as e:
                if e.errno == errno.ESRCH:
                    raise RemoteGone(f"peer {self.peer_pid} is gone") from e
                raise PartialTransfer(
                    f"transfer failed after {done} of {length} bytes: {e.strerror}") from e
            if n <= 0:
                raise PartialTransfer(f"transfer stalled after {done} of {length} bytes")
            done += n
        self.transfers += 1
        self.bytes += length

    def bulk_write(self, src_local_addr, dst_remote_addr, length):
        self._move(_sys.vm_writev, src_local_addr, dst_remote_addr, length)

    def bulk_read(self, src_remote_addr, dst_local_addr, length):
        self._move(_sys.vm_readv, dst_local_addr, src_remote_addr, length)


_CTL_REQ, _CTL_ACK = 1024 // 4, 1028 // 4
_CTL_REQUEST = struct.Struct("<16s512s")
_CTL_REQUEST_OFF = 1032
_CTL_RESULT = struct.Struct("<IiddQ32s")
_CTL_RESULT_OFF = 1600
_CTL_SLOTS = 8


class ControlArea:
    """Checkpoint requests from the launcher, serviced by the application.

    The launcher writes strategy and path, then bumps the request seq; it
    must not post another request until the application has acked this one.
    The application notices the bump at its next API entry, acks it,
    checkpoints, and publishes the result in the slot for that seq. Results
    can complete out of order (a refused request finishes before a forked
    write that is still running), hence one slot per recent seq.
    """

    def __init__(self, region):
        self.region = region
        self.u32 = region.u32

    def request(self, strategy, path):
        seq = self.u32[_CTL_REQ] + 1
        _CTL_REQUEST.pack_into(self.region.mm, _CTL_REQUEST_OFF, strategy.encode(), path.encode())
        self.u32[_CTL_REQ] = seq
        return seq

    def acked(self, seq):
        return self.u32[_CTL_ACK] >= seq

    def pending(self):
        """(seq, strategy, path) of an unacknowledged request, else None."""
        seq = self.u32[_CTL_REQ]
        if seq == self.u32[_CTL_ACK]:
            return None
        strategy, path = _CTL_REQUEST.unpack_from(self.region.mm, _CTL_REQUEST_OFF)
        return seq, strategy.rstrip(b"\0").decode(), path.rstrip(b"\0").decode()

    def has_request(self):
        return self.u32[_CTL_REQ] != self.u32[_CTL_ACK]

    def acknowledge(self, seq):
        self.u32[_CTL_ACK] = seq

    def publish(self, seq, status=0, pause_ms=0.0, total_ms=0.0, nbytes=0, code=""):
        off = _CTL_RESULT_OFF + (seq % _CTL_SLOTS) * 64
        _CTL_RESULT.pack_into(self.region.mm, off, 0, status, pause_ms, total_ms, nbytes,
                              code.encode()[:32])
        self.u32[off // 4] = seq

    def result(self, seq):
        """(status, pause_ms, total_ms, bytes, code) once ``seq`` is done, else None."""
        off = _CTL_RESULT_OFF + (seq % _CTL_SLOTS) * 64
        if self.u32[off // 4] != seq:
            return None
        _, status, pause, total, nbytes, code = _CTL_RESULT.unpack_from(self.region.mm, off)
        return status, pause, total, nbytes, code.rstrip(b"\0").decode()


def describe(opcode):
    op = BY_CODE.get(opcode)
    return op.name if op else f"opcode {opcode}"
