import os
import subprocess
import sys
import time
import uuid

import numpy as np
import pytest

from crum.api import BY_CODE, BY_NAME, OPS
from crum.client import Remote
from crum.device import Kind
from crum.errors import InvalidArgument, RangeOutOfBounds, UnknownRegion
from crum.launch import start_proxy
from crum.proxy import ProxySession
from crum.wire import ClientChannel, SharedRegion

NOP = BY_NAME["NOP"].code


def test_api_totality():
    names = [op.name for op in OPS]
    codes = [op.code for op in OPS]
    assert len(set(names)) == len(names) and len(set(codes)) == len(codes)
    assert set(BY_CODE) == set(codes)
    for op in OPS:
        assert callable(getattr(Remote, op.method)), op.name
        assert callable(getattr(ProxySession, "do_" + op.method)), op.name
    stubs = {n for n in vars(Remote) if not n.startswith("_") and n != "chan"}
    arms = {n[3:] for n in vars(ProxySession) if n.startswith("do_")}
    assert stubs == arms == {op.method for op in OPS}


def test_logged_ops_are_the_state_creating_ones():
    logged = {op.name for op in OPS if op.logged}
    assert logged == {"ALLOC", "FREE", "STREAM_CREATE", "STREAM_DESTROY", "EVENT_CREATE"}


def test_shutdown_exits_zero(proxy):
    Remote(ClientChannel(proxy.region)).shutdown()
    assert proxy.wait(10) == 0


def test_alloc_reply(proxy):
    r = Remote(ClientChannel(proxy.region))
    assert r.alloc(Kind.MANAGED, 4096) == (1, 0)
    assert r.alloc(Kind.DEVICE, 10) == (2, 4096)


def test_million_pipelined_nops():
    p = start_proxy()
    try:
        cc = ClientChannel(p.region)
        n = 10 ** 6
        t = time.perf_counter()
        for _ in range(n):
            cc.send(NOP)
        cc.flush()
        elapsed = time.perf_counter() - t
        published, completed, reqs, replies = p.region.counters()
        # every seq completed, in order (the tail only moves to the seq just done)
        assert published == completed == reqs == replies == n
        assert cc.head == n
        print(f"{n} NOPs in {elapsed:.2f}s")
    finally:
        p.stop()


def test_passivity_counts(proxy):
    r = Remote(ClientChannel(proxy.region))
    r.attach(os.getpid())
    for _ in range(5):
        r.nop()
    r.ping()
    r.stream_create()
    _, _, reqs, replies = proxy.region.counters()
    assert reqs == replies == 8


def test_uvm_range_checks(proxy):
    r = Remote(ClientChannel(proxy.region))
    r.attach(os.getpid())
    rid, _ = r.alloc(Kind.MANAGED, 8192)
    buf = np.zeros(8192, dtype=np.uint8)
    with pytest.raises(RangeOutOfBounds):
        r.uvm_read(rid, 4096, 8192, buf.ctypes.data, bulk_len=8192)
    with pytest.raises(UnknownRegion):
        r.uvm_read(rid + 1, 0, 16, buf.ctypes.data, bulk_len=16)
    with pytest.raises(InvalidArgument):
        r.uvm_read(rid, 0, 0, buf.ctypes.data)
    dev, _ = r.alloc(Kind.DEVICE, 4096)
    with pytest.raises(InvalidArgument):
        r.uvm_read(dev, 0, 16, buf.ctypes.data, bulk_len=16)


def test_uvm_write_then_read(proxy):
    r = Remote(ClientChannel(proxy.region))
    r.attach(os.getpid())
    rid, _ = r.alloc(Kind.MANAGED, 3 * 4096 + 5)
    src = np.random.default_rng(0).integers(0, 256, 3 * 4096 + 5, dtype=np.uint8)
    back = np.zeros_like(src)
    r.uvm_write(rid, 0, len(src), src.ctypes.data, bulk_len=len(src))
    r.uvm_read(rid, 0, len(src), back.ctypes.data, bulk_len=len(src))
    assert np.array_equal(src, back)


def test_large_region_write():
    n = 256 << 20
    p = start_proxy(env={**os.environ, "CRUM_ARENA_BYTES": str(n + (1 << 20))})
    try:
        r = Remote(ClientChannel(p.region))
        r.attach(os.getpid())
        rid, _ = r.alloc(Kind.MANAGED, n)
        src = np.full(n, 7, dtype=np.uint8)
        t = time.perf_counter()
        r.uvm_write(rid, 0, n, src.ctypes.data, bulk_len=n)
        print(f"one {n >> 20} MiB write took {time.perf_counter() - t:.3f}s")
        tail = np.zeros(4096, dtype=np.uint8)
        r.uvm_read(rid, n - 4096, 4096, tail.ctypes.data, bulk_len=4096)
        assert (tail == 7).all()
    finally:
        p.stop()


def test_bad_opcode_exits_two(proxy):
    cc = ClientChannel(proxy.region)
    cc.send(999)
    assert proxy.wait(10) == 2


def test_version_mismatch_exits_two():
    name = f"crum-test-{uuid.uuid4().hex[:8]}"
    region = SharedRegion.create(name)
    region.mm[0] = 99
    try:
        rc = subprocess.run([sys.executable, "-m", "crum.proxy", "--shm", name],
                            capture_output=True, timeout=30).returncode
    finally:
        region.unlink()
        region.close()
    assert rc == 2


def test_client_death_tears_proxy_down(proxy):
    code = ("import os, sys\n"
            "from crum.wire import SharedRegion, ClientChannel\n"
            "from crum.client import Remote\n"
            "r = Remote(ClientChannel(SharedRegion.attach(sys.argv[1])))\n"
            "r.attach(os.getpid())\n"
            "os._exit(0)\n")
    subprocess.run([sys.executable, "-c", code, proxy.shm_name], check=True, timeout=30)
    assert proxy.wait(10) == 3


def test_state_dump(proxy):
    from crum.client import Session
    s = Session(proxy.region)
    try:
        a = s.malloc_managed(4096)
        s.stream_create()
        s.synchronize()
        dump = s.state_dump()
        assert dump["allocations"] == [[a.region_id, 0, 4096, int(Kind.MANAGED)]]
        assert dump["streams"] == [0, 1]
    finally:
        s.close(shutdown=True)
