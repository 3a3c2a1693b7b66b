"""Checkpoint-strategy benchmarks.

Each benchmark case starts a fresh proxy, builds a workload's state in this
process, runs one compute step, then takes one checkpoint with the chosen
strategy. Results go to a CSV with the columns in :data:`FIELDS` and to a
plain-text table. Timing columns are seconds.

``crum bench --overhead`` additionally times the tinyker kernel sequence run
directly on host arrays against the same sequence under the runtime.
"""

import csv
import os
import sys
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import kernels
from .client import Session
from .image import CODEC_NAMES
from .launch import start_proxy

FIELDS = ["workload", "strategy", "codec", "synced", "seed", "payload_bytes", "pause_time",
          "total_time", "image_bytes", "drain_time", "fork_time", "write_time", "faults_taken",
          "bulk_bytes"]

OVERHEAD_FIELDS = ["workload", "kernels", "native_time", "runtime_time", "ratio", "faults_taken"]

_CODEC_LABEL = {v: k for k, v in CODEC_NAMES.items()}


@dataclass
class BenchResult:
    workload: str
    strategy: str
    codec: str
    synced: bool
    seed: int
    payload_bytes: int
    pause_time: float
    total_time: float
    image_bytes: int
    drain_time: float
    fork_time: float
    write_time: float
    faults_taken: int
    bulk_bytes: int


assert [f.name for f in fields(BenchResult)] == FIELDS


def _build(s, workload, size_bytes, seed):
    """Create the workload's regions and run one compute step; returns the regions."""
    from .workloads import dotprod_setup
    rng = np.random.default_rng(seed)
    if workload in ("dotprod", "redundant"):
        n = size_bytes // 8
        a, b, out = dotprod_setup(s, n, seed, 0.5 if workload == "redundant" else 0.0)
        s.launch("dot", [a, b, out])
        s.synchronize()
        return [a, b, out]
    if workload == "tinyker":
        regs = []
        total = 0
        while total < size_bytes:
            size = int(rng.integers(3, 33)) * 4096
            r = s.malloc_managed(size)
            r.write(0, rng.random(size // 4, dtype=np.float32))
            regs.append(r)
            total += size
        for i in range(len(regs)):
            s.launch("saxpy", [regs[i], regs[(i + 1) % len(regs)]], [0.25])
        s.synchronize()
        return regs
    if workload == "bigreg":
        n = size_bytes // 12
        regs = [s.malloc_managed(n * 4) for _ in range(3)]
        for r in regs[:2]:
            r.write(0, rng.random(n, dtype=np.float32))
        s.launch("stencil3", [regs[0], regs[2]])
        s.launch("saxpy", [regs[0], regs[1]], [0.1])
        s.synchronize()
        return regs
    raise ValueError(f"unknown benchmark workload {workload!r}")


def bench_checkpoint(workload, strategy, size_bytes, out_dir, throttle_mbps=None, sync=True,
                     seed=1, env=None):
    """One checkpoint of one workload with one strategy."""
    env = dict(os.environ if env is None else env)
    env.setdefault("CRUM_ARENA_BYTES", str(size_bytes + (64 << 20)))
    proxy = start_proxy(env=env)
    s = Session(proxy.region)
    try:
        _build(s, workload, size_bytes, seed)
        path = os.path.join(out_dir, f"{workload}-{strategy}.img")
        rep = s.checkpoint(path, strategy, sync=sync, throttle_mbps=throttle_mbps)
        if rep.status == "running":
            rep = s.wait_checkpoint()
        if rep.status != "done":
            raise RuntimeError(f"{strategy} checkpoint failed: {rep.error} {rep.detail}")
        st = s.stats
        result = BenchResult(workload, strategy, _CODEC_LABEL[rep.codec], sync, seed,
                             rep.payload_bytes, rep.pause_time, rep.total_time, rep.image_bytes,
                             rep.drain_time, rep.fork_time, rep.write_time, st.faults,
                             st.bulk_bytes)
        os.unlink(path)
        return result
    finally:
        s.close(shutdown=True)
        proxy.stop()


def tinyker_overhead(regions=32, iters=20, kernel_us=20.0, seed=1):
    """Wall time of the tinyker kernel sequence: plain host arrays vs under the runtime."""
    rng = np.random.default_rng(seed)
    sizes = [int(x) * 4096 for x in rng.integers(3, 33, size=regions)]
    init = [rng.random(n // 4, dtype=np.float32) for n in sizes]

    # native: same kernels on host arrays, simulated durations paid at each sync
    arrays = [x.copy().view(np.uint8) for x in init]
    t = time.perf_counter()
    for it in range(iters):
        owed = 0.0
        for i in range(regions):
            j = (i + 1) % regions
            owed += kernels.run("saxpy", [arrays[i], arrays[j]], [0.25])
            owed += kernels.run("scale", [arrays[j]], [0.8])
            owed += kernels.run("sleep_us", [], [kernel_us])
        time.sleep(owed * 1e-6)
        for k in range(0, regions, max(1, regions // 8)):
            v = arrays[(k + it) % regions].view(np.float32)
            v[1] = v[0] * np.float32(0.5) + np.float32(it)
    native = time.perf_counter() - t

    proxy = start_proxy()
    s = Session(proxy.region)
    try:
        regs = []
        for n, x in zip(sizes, init):
            r = s.malloc_managed(n)
            r.write(0, x)
            regs.append(r)
        s.synchronize()
        f0 = s.stats.faults
        t = time.perf_counter()
        for it in range(iters):
            for i in range(regions):
                j = (i + 1) % regions
                s.launch("saxpy", [regs[i], regs[j]], [0.25])
                s.launch("scale", [regs[j]], [0.8])
                s.launch("sleep_us", [], [kernel_us])
            s.synchronize()
            for k in range(0, regions, max(1, regions // 8)):
                a = regs[(k + it) % regions].array(np.float32)
                a[1] = a[0] * np.float32(0.5) + np.float32(it)
        runtime = time.perf_counter() - t
        faults = s.stats.faults - f0
    finally:
        s.close(shutdown=True)
        proxy.stop()
    return {"workload": "tinyker", "kernels": iters * regions * 3, "native_time": native,
            "runtime_time": runtime, "ratio": runtime / native, "faults_taken": faults}


def write_csv(path, rows, names):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=names)
        w.writeheader()
        for r in rows:
            w.writerow(r if isinstance(r, dict) else asdict(r))


def format_table(rows, names):
    rows = [r if isinstance(r, dict) else asdict(r) for r in rows]

    def cell(v):
        return f"{v:.3f}" if isinstance(v, float) else str(v)

    widths = [max(len(n), *(len(cell(r[n])) for r in rows)) if rows else len(n) for n in names]
    lines = ["  ".join(n.ljust(w) for n, w in zip(names, widths))]
    for r in rows:
        lines.append("  ".join(cell(r[n]).ljust(w) for n, w in zip(names, widths)))
    return "\n".join(lines)


def write_chart(path, rows):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    labels = [f"{r.workload}\n{r.strategy}" for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(6, len(rows) * 0.9), 4))
    ax.bar(x - 0.2, [r.pause_time for r in rows], 0.4, label="pause")
    ax.bar(x + 0.2, [r.total_time for r in rows], 0.4, label="total")
    ax.set_xticks(x, labels, fontsize=7)
    ax.set_ylabel("seconds")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def add_arguments(p):
    p.add_argument("--workloads", default="dotprod,redundant",
                   help="comma list of dotprod, redundant, tinyker, bigreg")
    p.add_argument("--strategies", default="naive,gzip,pgzip,lz4,forked")
    p.add_argument("--size-mib", type=int, default=64, help="managed payload per workload")
    p.add_argument("--throttle-mbps", type=float, default=None,
                   help="storage bandwidth limit (default: CRUM_STORE_THROTTLE_MBPS)")
    p.add_argument("--no-sync", action="store_true", help="skip fsync of image files")
    p.add_argument("--both-sync", action="store_true", help="report synced and unsynced runs")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out-dir", default=None, help="where images are written (then removed)")
    p.add_argument("--csv", default=None, help="write results here")
    p.add_argument("--chart", default=None, help="write a bar chart (needs matplotlib)")
    p.add_argument("--overhead", action="store_true",
                   help="also time tinyker natively vs under the runtime")


def main_from_args(args):
    import tempfile
    out_dir = args.out_dir or tempfile.mkdtemp(prefix="crum-bench-")
    syncs = [True, False] if args.both_sync else [not args.no_sync]
    rows = []
    for workload in [w for w in args.workloads.split(",") if w]:
        for strategy in [x for x in args.strategies.split(",") if x]:
            for sync in syncs:
                rows.append(bench_checkpoint(workload, strategy, args.size_mib << 20, out_dir,
                                             args.throttle_mbps, sync, args.seed))
    print(format_table(rows, FIELDS))
    if args.csv:
        write_csv(args.csv, rows, FIELDS)
    if args.chart:
        write_chart(args.chart, rows)
    if args.overhead:
        ov = tinyker_overhead(seed=args.seed)
        print()
        print(format_table([ov], OVERHEAD_FIELDS))
        if args.csv:
            base, ext = os.path.splitext(args.csv)
            write_csv(f"{base}-overhead{ext or '.csv'}", [ov], OVERHEAD_FIELDS)
    sys.stdout.flush()
    return 0
