"""Thin ctypes layer over the Linux primitives the runtime needs.

mmap at fixed addresses, mprotect, futex wait/wake and the cross-memory-attach
calls (process_vm_readv / process_vm_writev). Nothing here knows about
sessions or regions.
"""

import ctypes
import errno
import mmap
import os
import platform

_libc = ctypes.CDLL(None, use_errno=True)

PROT_NONE = 0x0
PROT_READ = 0x1
PROT_WRITE = 0x2
PROT_RW = PROT_READ | PROT_WRITE

MAP_PRIVATE = 0x02
MAP_ANONYMOUS = 0x20
MAP_FIXED_NOREPLACE = 0x100000
MAP_FAILED = ctypes.c_void_p(-1).value

PAGE_SIZE = mmap.PAGESIZE

_SYS_FUTEX = {"x86_64": 202, "aarch64": 98}.get(platform.machine())
FUTEX_WAIT = 0
FUTEX_WAKE = 1

_libc.mmap.restype = ctypes.c_void_p
_libc.mmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int, ctypes.c_int,
                       ctypes.c_int, ctypes.c_long]
_libc.munmap.restype = ctypes.c_int
_libc.munmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t]
_libc.mprotect.restype = ctypes.c_int
_libc.mprotect.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int]
_libc.syscall.restype = ctypes.c_long


class iovec(ctypes.Structure):
    _fields_ = [("iov_base", ctypes.c_void_p), ("iov_len", ctypes.c_size_t)]


_libc.process_vm_readv.restype = ctypes.c_ssize_t
_libc.process_vm_readv.argtypes = [ctypes.c_int, ctypes.POINTER(iovec), ctypes.c_ulong,
                                   ctypes.POINTER(iovec), ctypes.c_ulong, ctypes.c_ulong]
_libc.process_vm_writev.restype = ctypes.c_ssize_t
_libc.process_vm_writev.argtypes = _libc.process_vm_readv.argtypes


class timespec(ctypes.Structure):
    _fields_ = [("tv_sec", ctypes.c_long), ("tv_nsec", ctypes.c_long)]


def _oserror(what):
    e = ctypes.get_errno()
    return OSError(e, f"{what}: {os.strerror(e)}")


def map_fixed(addr, length):
    """Map anonymous private read-write memory exactly at ``addr``.

    Raises OSError(EEXIST) when any part of the range is already mapped.
    """
    got = _libc.mmap(addr, length, PROT_RW, MAP_PRIVATE | MAP_ANONYMOUS | MAP_FIXED_NOREPLACE, -1, 0)
    if got is None or got == MAP_FAILED:
        raise _oserror("mmap")
    if got != addr:
        # kernel predates MAP_FIXED_NOREPLACE and treated it as a hint
        _libc.munmap(got, length)
        raise OSError(errno.EEXIST, f"mmap: address {addr:#x} unavailable")
    return got


def unmap(addr, length):
    if _libc.munmap(addr, length) != 0:
        raise _oserror("munmap")


def protect(addr, length, prot):
    if _libc.mprotect(addr, length, prot) != 0:
        raise _oserror("mprotect")


def address_of(buf):
    """Base address of a writable buffer (bytearray, mmap, numpy array)."""
    return ctypes.addressof(ctypes.c_char.from_buffer(buf))


def futex_wait(addr, expected, timeout=None):
    """Sleep while the u32 at ``addr`` equals ``expected``. Spurious returns are fine."""
    ts = None
    if timeout is not None:
        sec = int(timeout)
        ts = ctypes.byref(timespec(sec, int((timeout - sec) * 1e9)))
    _libc.syscall(_SYS_FUTEX, ctypes.c_void_p(addr), FUTEX_WAIT, ctypes.c_uint32(expected), ts, None, 0)


def futex_wake(addr, n=1):
    _libc.syscall(_SYS_FUTEX, ctypes.c_void_p(addr), FUTEX_WAKE, n, None, None, 0)


def vm_readv(pid, local_addr, remote_addr, length):
    """Copy ``length`` bytes from ``remote_addr`` in ``pid`` to ``local_addr`` here.

    Returns the number of bytes moved (may be short); raises OSError on failure.
    """
    local = iovec(local_addr, length)
    remote = iovec(remote_addr, length)
    n = _libc.process_vm_readv(pid, ctypes.byref(local), 1, ctypes.byref(remote), 1, 0)
    if n < 0:
        raise _oserror("process_vm_readv")
    return n


def vm_writev(pid, local_addr, remote_addr, length):
    local = iovec(local_addr, length)
    remote = iovec(remote_addr, length)
    n = _libc.process_vm_writev(pid, ctypes.byref(local), 1, ctypes.byref(remote), 1, 0)
    if n < 0:
        raise _oserror("process_vm_writev")
    return n


def memmove(dst_addr, src_addr, length):
    ctypes.memmove(dst_addr, src_addr, length)


def pid_alive(pid):
    """True if ``pid`` exists and is not a zombie."""
    if pid <= 0:
        return False
    try:
        with open(f"/proc/{pid}/stat", "rb") as f:
            stat = f.read()
    except FileNotFoundError:
        return False
    # state follows the parenthesised comm field
    return stat[stat.rindex(b")") + 2:stat.rindex(b")") + 3] not in (b"Z", b"X")


def set_timer_slack(ns):
    PR_SET_TIMERSLACK = 29
    _libc.prctl(PR_SET_TIMERSLACK, ctypes.c_ulong(ns), 0, 0, 0)


def memory_map_lines(pid="self"):
    with open(f"/proc/{pid}/maps") as f:
        return f.read().splitlines()
