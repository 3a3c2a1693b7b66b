"""The proxy: the only process that holds a device session.

It is a passive listener. Every action it takes is the answer to exactly one
call message from the application, and bulk copies run inline on the single
request thread.

Exit codes: 0 after SHUTDOWN, 2 on a protocol mismatch, 3 when the channel
is torn down underneath it.
"""

import argparse
import json
import logging
import os
import signal
import sys

from . import _sys
from .api import OPS, unpack_launch
from .device import Kind, KernelTask, device_init
from .errors import CrumError, InvalidArgument, ProtocolError, VersionMismatch
from .wire import BULK_SINGLE_COPY, BulkChannel, ProxyChannel, SharedRegion

log = logging.getLogger("crum.proxy")

EXIT_OK, EXIT_PROTOCOL, EXIT_TORN_DOWN = 0, 2, 3


class TornDown(Exception):
    pass


class ProxySession:
    def __init__(self, region, device):
        self.region = region
        self.device = device
        self.chan = ProxyChannel(region)
        self.bulk = BulkChannel(region.bulk_mode)
        self.region_index = {}      # RegionId -> proxy-local address, MANAGED only
        self.running = True
        self.attached = False
        self.handlers = {}
        self._launch_cache = {}     # raw launch payload -> (stream, KernelTask)
        for op in OPS:
            fn = getattr(self, "do_" + op.method)
            self.handlers[op.code] = (op, fn, op.arg_struct, op.result_struct if op.result else None)

    def _alive(self):
        if self.attached and not _sys.pid_alive(self.bulk.peer_pid):
            raise TornDown(f"client {self.bulk.peer_pid} died while attached")
        if os.getppid() == 1:
            raise TornDown("launcher is gone")

    def serve(self):
        chan = self.chan
        handlers = self.handlers
        while self.running:
            chan.wait_message(self._alive)
            seq, opcode, blocking, bulk_len, payload = chan.next_message()
            entry = handlers.get(opcode)
            if entry is None:
                chan.complete(seq, opcode, blocking, ProtocolError.status, msg=f"bad opcode {opcode}")
                log.error("malformed opcode %d at seq %d", opcode, seq)
                return EXIT_PROTOCOL
            op, fn, args, res = entry
            try:
                out = fn(*args.unpack_from(payload)) if args.size else fn(payload)
                chan.complete(seq, opcode, blocking, 0, res.pack(*out) if res else b"")
            except CrumError as e:
                chan.complete(seq, opcode, blocking, e.status, msg=str(e))
            except Exception as e:  # noqa: BLE001 - reported to the caller
                log.exception("call %s failed", op.name)
                chan.complete(seq, opcode, blocking, CrumError.status, msg=f"{type(e).__name__}: {e}")
        return EXIT_OK

    # -- dispatch arms, one per Op ------------------------------------

    def do_nop(self, payload):
        return None

    def do_ping(self, payload):
        return None

    def do_attach(self, pid):
        self.bulk.peer_pid = pid
        self.attached = True
        d = self.device
        return os.getpid(), d.epoch, d.capacity, d.page_size

    def do_detach(self, payload):
        self.attached = False
        self.bulk.peer_pid = 0

    def do_shutdown(self, payload):
        self.running = False

    def do_alloc(self, kind, length):
        rid, offset = self.device.alloc(kind, length)
        if kind == Kind.MANAGED:
            self.region_index[rid] = self.device.base_addr + offset
        return rid, offset

    def do_free(self, rid):
        self.device.free(rid)
        self.region_index.pop(rid, None)

    def do_stream_create(self, payload):
        return (self.device.stream_create(),)

    def do_stream_destroy(self, sid):
        self.device.stream_destroy(sid)

    def do_event_create(self, payload):
        return (self.device.event_create(),)

    def do_event_record(self, eid, sid):
        self.device.event_record(eid, sid)

    def do_event_query(self, eid):
        return (int(self.device.event_query(eid)),)

    def do_launch(self, payload):
        # iterative codes relaunch the same few kernels; decode each payload once
        hit = self._launch_cache.get(payload)
        if hit is None:
            stream, name, regions, scalars, grid = unpack_launch(payload)
            hit = (stream, KernelTask(name, regions, scalars, grid))
            if len(self._launch_cache) >= 4096:
                self._launch_cache.clear()
            self._launch_cache[payload] = hit
        self.device.launch(*hit)

    def do_synchronize(self, payload):
        self.device.synchronize()

    def _transfer(self, rid, offset, length, remote_addr, to_remote, kind=None):
        d = self.device
        pos = d.check_range(rid, offset, length, kind)
        if length == 0:
            raise InvalidArgument("zero-length transfer")
        # host-visible transfers observe all previously launched work
        if d.pending():
            d.synchronize()
        local = d.base_addr + pos
        if self.bulk.mode == BULK_SINGLE_COPY:
            if to_remote:
                self.bulk.bulk_write(local, remote_addr, length)
            else:
                self.bulk.bulk_read(remote_addr, local, length)
        else:
            if length > self.region.scratch_size:
                raise InvalidArgument(f"{length} bytes exceed the scratch buffer")
            scratch = self.region.scratch_addr
            if to_remote:
                _sys.memmove(scratch, local, length)
            else:
                _sys.memmove(local, scratch, length)

    def do_uvm_read(self, rid, offset, length, dst):
        self._transfer(rid, offset, length, dst, True, Kind.MANAGED)

    def do_uvm_write(self, rid, offset, length, src):
        self._transfer(rid, offset, length, src, False, Kind.MANAGED)

    def do_memcpy_h2d(self, rid, offset, length, src):
        self._transfer(rid, offset, length, src, False)

    def do_memcpy_d2h(self, rid, offset, length, dst):
        self._transfer(rid, offset, length, dst, True)

    def do_state_dump(self, dst, capacity):
        data = json.dumps(self.device.snapshot(), sort_keys=True).encode()
        if len(data) > capacity:
            raise InvalidArgument(f"state dump needs {len(data)} bytes, buffer holds {capacity}")
        buf = bytearray(data)
        if self.bulk.mode == BULK_SINGLE_COPY:
            self.bulk.bulk_write(_sys.address_of(buf), dst, len(buf))
        else:
            self.region.scratch()[:len(buf)] = buf
        return (len(data),)


def proxy_main(shm_name):
    try:
        region = SharedRegion.attach(shm_name)
    except VersionMismatch as e:
        log.error("%s", e)
        return EXIT_PROTOCOL
    except CrumError as e:
        log.error("%s", e)
        return EXIT_TORN_DOWN
    # sleep_us kernels need sub-100us wakeups
    _sys.set_timer_slack(1000)
    device = device_init()
    session = ProxySession(region, device)
    session.chan.announce(os.getpid())
    code = EXIT_TORN_DOWN
    try:
        code = session.serve()
    except TornDown as e:
        log.warning("%s", e)
    finally:
        session.chan.mark_exited()
    return code


def main(argv=None):
    p = argparse.ArgumentParser(prog="crum-proxy", description="device proxy for one application")
    p.add_argument("--shm", required=True, help="name of the shared region under /dev/shm")
    args = p.parse_args(argv)
    logging.basicConfig(level=os.environ.get("CRUM_LOG", "WARNING"),
                        format="crum-proxy[%(process)d] %(levelname)s %(message)s")
    signal.signal(signal.SIGTERM, lambda *_: sys.exit(EXIT_TORN_DOWN))
    return proxy_main(args.shm)


if __name__ == "__main__":
    sys.exit(main())
