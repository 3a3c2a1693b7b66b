"""Interface description of every forwarded call.

Client stubs (:class:`crum.client.Remote`) and proxy dispatch arms
(:class:`crum.proxy.ProxySession`) are both derived from :data:`OPS`; adding a
call means adding one :class:`Op` here plus a ``do_<name>`` handler in the
proxy. ``logged`` marks state-creating calls that go into the replay log.
"""

import struct
from dataclasses import dataclass

PAYLOAD_BYTES = 240
KERNEL_NAME_BYTES = 24
MAX_KERNEL_REGIONS = 8
MAX_KERNEL_SCALARS = 16

_LAUNCH_HEAD = struct.Struct("<IIIBB24s")


@dataclass(frozen=True)
class Op:
    name: str
    code: int
    blocking: bool
    args: str = ""
    result: str = ""
    logged: bool = False
    bulk: bool = False

    @property
    def arg_struct(self):
        return struct.Struct("<" + self.args)

    @property
    def result_struct(self):
        return struct.Struct("<" + self.result)

    @property
    def method(self):
        return self.name.lower()


OPS = [
    Op("NOP", 1, blocking=False),
    Op("PING", 2, blocking=True),
    Op("ATTACH", 3, blocking=True, args="I", result="IIQI"),
    Op("DETACH", 4, blocking=True),
    Op("SHUTDOWN", 5, blocking=True),
    Op("ALLOC", 6, blocking=True, args="BQ", result="IQ", logged=True),
    Op("FREE", 7, blocking=True, args="I", logged=True),
    Op("STREAM_CREATE", 8, blocking=True, result="I", logged=True),
    Op("STREAM_DESTROY", 9, blocking=True, args="I", logged=True),
    Op("EVENT_CREATE", 10, blocking=True, result="I", logged=True),
    Op("EVENT_RECORD", 11, blocking=False, args="II"),
    Op("EVENT_QUERY", 12, blocking=True, args="I", result="B"),
    Op("LAUNCH", 13, blocking=False),
    Op("SYNCHRONIZE", 14, blocking=True),
    Op("UVM_READ", 15, blocking=True, args="IQQQ", bulk=True),
    Op("UVM_WRITE", 16, blocking=True, args="IQQQ", bulk=True),
    Op("MEMCPY_H2D", 17, blocking=True, args="IQQQ", bulk=True),
    Op("MEMCPY_D2H", 18, blocking=True, args="IQQQ", bulk=True),
    Op("STATE_DUMP", 19, blocking=True, args="QQ", result="Q", bulk=True),
]

BY_CODE = {op.code: op for op in OPS}
BY_NAME = {op.name: op for op in OPS}


def pack_launch(stream, kernel_name, region_args, scalar_args, grid=(1, 1)):
    name = kernel_name.encode()
    if len(name) > KERNEL_NAME_BYTES:
        raise ValueError(f"kernel name longer than {KERNEL_NAME_BYTES} bytes")
    if len(region_args) > MAX_KERNEL_REGIONS or len(scalar_args) > MAX_KERNEL_SCALARS:
        raise ValueError("too many kernel arguments for one call slot")
    nr, ns = len(region_args), len(scalar_args)
    return (_LAUNCH_HEAD.pack(stream, grid[0], grid[1], nr, ns, name)
            + struct.pack(f"<{nr}I{ns}d", *region_args, *scalar_args))


def unpack_launch(payload):
    stream, blocks, threads, nr, ns, name = _LAUNCH_HEAD.unpack_from(payload)
    rest = struct.unpack_from(f"<{nr}I{ns}d", payload, _LAUNCH_HEAD.size)
    return (stream, name.rstrip(b"\0").decode(), list(rest[:nr]), list(rest[nr:]),
            (blocks, threads))
