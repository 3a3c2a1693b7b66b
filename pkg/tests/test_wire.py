import logging
import os
import threading
import time
import uuid

import numpy as np
import pytest

from crum import _sys
from crum.api import BY_NAME, pack_launch
from crum.errors import ChannelClosed, DeferredCallError, RemoteGone, UnknownRegion, VersionMismatch
from crum.wire import (
    LAYOUT_VERSION,
    BulkChannel,
    ClientChannel,
    ControlArea,
    ProxyChannel,
    SharedRegion,
)

NOP = BY_NAME["NOP"].code
PING = BY_NAME["PING"].code
LAUNCH = BY_NAME["LAUNCH"].code


@pytest.fixture
def ring():
    """A shared region whose 'proxy' end is driven by the test itself."""
    region = SharedRegion.create(f"crum-test-{uuid.uuid4().hex[:8]}", nslots=64, depth=64)
    pc = ProxyChannel(region)
    pc.announce(os.getpid())
    yield region, ClientChannel(region), pc
    region.unlink()
    region.close()


def consume(pc, n, stall=None, seen=None):
    for i in range(n):
        pc.wait_message(lambda: None)
        seq, op, blocking, bulk_len, payload = pc.next_message()
        if seen is not None:
            seen.append(seq)
        if stall is not None and i == stall[0]:
            time.sleep(stall[1])
        pc.complete(seq, op, blocking, result=b"ok")


def test_sixteen_pipelined_calls_return_before_any_executes(ring):
    region, cc, pc = ring
    for _ in range(16):
        cc.send(NOP)
    published, completed, reqs, _ = region.counters()
    assert (published, completed, reqs) == (16, 0, 0)
    seen = []
    t = threading.Thread(target=consume, args=(pc, 16, None, seen))
    t.start()
    cc.flush()
    t.join()
    assert seen == list(range(1, 17))
    published, completed, reqs, replies = region.counters()
    assert published == completed == reqs == replies == 16


def test_full_ring_applies_back_pressure(ring):
    region, cc, pc = ring
    cc.depth = 4
    for _ in range(4):
        cc.send(NOP)
    done = threading.Event()

    def fifth():
        cc.send(NOP)
        done.set()

    t = threading.Thread(target=fifth)
    t.start()
    assert not done.wait(0.1)          # blocked, not failed
    consume(pc, 1)
    assert done.wait(2.0)
    t.join()
    consume(pc, 4)
    cc.flush()
    assert cc.unreplied() == 0


def test_blocking_call_reply(ring):
    region, cc, pc = ring
    t = threading.Thread(target=consume, args=(pc, 3))
    t.start()
    cc.send(NOP)
    cc.send(NOP)
    assert cc.call(PING)[:2] == b"ok"
    t.join()
    assert cc.head == pc.tail == 3


def test_enqueue_after_proxy_exit_is_channel_closed(ring):
    region, cc, pc = ring
    pc.mark_exited()
    with pytest.raises(ChannelClosed):
        cc.send(NOP)


def test_flush_with_dead_proxy_is_channel_closed(ring):
    region, cc, pc = ring
    cc.send(NOP)
    region.u32[32 // 4] = 2 ** 31 - 2          # a pid that does not exist
    with pytest.raises(ChannelClosed):
        cc.flush()


def test_flush_on_empty_pipeline(ring):
    region, cc, pc = ring
    cc.flush()
    assert cc.unreplied() == 0


def test_version_mismatch(ring):
    region, cc, pc = ring
    region.mm[0] = LAYOUT_VERSION + 1
    with pytest.raises(VersionMismatch):
        SharedRegion.attach(region.name)
    region.mm[0] = LAYOUT_VERSION


def test_attach_missing_region():
    with pytest.raises(ChannelClosed):
        SharedRegion.attach("crum-does-not-exist")


def test_deferred_error_carries_originating_seq(proxy):
    cc = ClientChannel(proxy.region)
    cc.send(NOP)
    bad = cc.send(LAUNCH, pack_launch(0, "fill", [42], [1.0]))
    cc.send(NOP)
    with pytest.raises(DeferredCallError) as ei:
        cc.flush()
    assert ei.value.seq == bad
    assert ei.value.opcode == LAUNCH
    assert ei.value.cause is UnknownRegion
    cc.flush()                                 # error is reported once


def test_liveness_with_stalled_consumer(ring):
    """A consumer stalled mid-operation never blocks enqueues that have ring space."""
    region, cc, pc = ring
    t = threading.Thread(target=consume, args=(pc, 20, (0, 0.1)))
    t.start()
    cc.send(NOP)
    time.sleep(0.01)                           # consumer is now inside its stall
    t0 = time.perf_counter()
    for _ in range(19):
        cc.send(NOP)
    assert time.perf_counter() - t0 < 0.05
    cc.flush()
    t.join()


def test_liveness_with_stalled_producer(ring):
    """A producer stalled between messages never keeps the consumer from finishing earlier ones."""
    region, cc, pc = ring
    for _ in range(3):
        cc.send(NOP)
    stalled = threading.Event()

    def producer():
        stalled.set()
        time.sleep(0.1)                        # stall before publishing the 4th message
        cc.send(NOP)

    t = threading.Thread(target=producer)
    t.start()
    stalled.wait()
    t0 = time.perf_counter()
    consume(pc, 3)
    assert time.perf_counter() - t0 < 0.05
    consume(pc, 1)
    t.join()
    cc.flush()


def test_control_area_slots(ring):
    region, cc, pc = ring
    ctl = ControlArea(region)
    assert ctl.pending() is None
    seq = ctl.request("forked", "/tmp/a.img")
    assert ctl.has_request() and ctl.pending() == (seq, "forked", "/tmp/a.img")
    ctl.acknowledge(seq)
    assert ctl.acked(seq) and ctl.pending() is None
    seq2 = ctl.request("naive", "/tmp/b.img")
    ctl.acknowledge(seq2)
    ctl.publish(seq2, 1, code="ConcurrentCheckpoint")
    assert ctl.result(seq) is None
    ctl.publish(seq, 0, 1.5, 9.0, 1234)
    assert ctl.result(seq) == (0, 1.5, 9.0, 1234, "")
    assert ctl.result(seq2) == (1, 0.0, 0.0, 0, "ConcurrentCheckpoint")


# -- bulk channel -----------------------------------------------------------------


def test_bulk_round_trip_one_mib():
    # the peer is this very process: CMA between two buffers of ours
    bulk = BulkChannel(peer_pid=os.getpid())
    src = np.random.default_rng(3).integers(0, 256, 1 << 20, dtype=np.uint8)
    remote = np.zeros_like(src)
    back = np.zeros_like(src)
    bulk.bulk_write(src.ctypes.data, remote.ctypes.data, len(src))
    bulk.bulk_read(remote.ctypes.data, back.ctypes.data, len(src))
    assert np.array_equal(src, back)
    assert bulk.transfers == 2 and bulk.bytes == 2 << 20


def test_bulk_zero_length_rejected():
    bulk = BulkChannel(peer_pid=os.getpid())
    buf = np.zeros(16, dtype=np.uint8)
    with pytest.raises(ValueError):
        bulk.bulk_write(buf.ctypes.data, buf.ctypes.data, 0)


def test_bulk_to_missing_peer():
    buf = np.zeros(16, dtype=np.uint8)
    with pytest.raises(RemoteGone):
        BulkChannel(peer_pid=0).bulk_read(buf.ctypes.data, buf.ctypes.data, 16)
    with pytest.raises(RemoteGone):
        BulkChannel(peer_pid=2 ** 31 - 2).bulk_read(buf.ctypes.data, buf.ctypes.data, 16)


def test_single_page_transfer_cost_spread(caplog):
    bulk = BulkChannel(peer_pid=os.getpid())
    ps = _sys.PAGE_SIZE
    src = np.ones(ps, dtype=np.uint8)
    dst = np.zeros(ps, dtype=np.uint8)
    times = np.empty(10_000)
    for i in range(len(times)):
        t = time.perf_counter_ns()
        bulk.bulk_write(src.ctypes.data, dst.ctypes.data, ps)
        times[i] = time.perf_counter_ns() - t
    us = times / 1e3
    with caplog.at_level(logging.INFO):
        logging.getLogger("crum.test").info(
            "page transfer us: min %.2f median %.2f p99 %.2f max %.2f std %.2f",
            us.min(), np.median(us), np.percentile(us, 99), us.max(), us.std())
    assert dst.all()
    assert us.min() > 0 and us.max() >= us.min()
    assert "page transfer us" in caplog.text
