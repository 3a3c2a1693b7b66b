"""Bundled applications used by the tests and the benchmark harness.

Each workload keeps all evolving state in managed (or device) regions plus a
small blob holding the next iteration number, so a restart resumes exactly
where the checkpoint was taken. Every workload prints ``RESULT <checksum>``
when it finishes.

Run one under the launcher::

    crum run -- dotprod --n 1048576
"""

import argparse
import hashlib
import struct
import sys

import numpy as np

from . import _sys
from .client import crum_init
from .errors import CrumError

_BLOB = struct.Struct("<Qd")


def random_floats(rng, n):
    """Float32 values with 31 random bits each: finite, |x| < 2, barely compressible."""
    bits = rng.integers(0, 1 << 32, size=n, dtype=np.uint32)
    bits &= np.uint32(0xBFFFFFFF)
    return bits.view(np.float32)


def checksum(regions):
    # a device call first: the final host writes must not be read back in the same write phase
    if regions:
        regions[0].session.synchronize()
    h = hashlib.sha256()
    for r in regions:
        h.update(r.view())
    return h.hexdigest()[:32]


def arena_isolated():
    """True when this process has no mapping of the proxy's device arena."""
    return not any("crum-arena" in line for line in _sys.memory_map_lines())


class Progress:
    """Iteration counter plus resume/checkpoint hooks shared by all workloads."""

    def __init__(self, s, args):
        self.s = s
        self.args = args
        self.extra = 0.0
        self.start = 0
        self.isolation_checks = 0
        if s.restored_state:
            self.start, self.extra = _BLOB.unpack(s.restored_state)
        self.resumed = bool(s.restored_state)
        s.set_app_state(lambda: _BLOB.pack(self.next_iter, self.extra))
        self.next_iter = self.start

    def regions(self):
        return [self.s.managed[rid] for rid in sorted(self.s.managed)]

    def done(self, it):
        """Call at the end of iteration ``it`` (0-based)."""
        self.next_iter = it + 1
        a = self.args
        if a.check_isolation:
            if not arena_isolated():
                raise SystemExit("ERR IsolationBroken application maps the device arena")
            self.isolation_checks += 1
        if a.ckpt_at is not None and a.ckpt_at == it + 1:
            rep = self.s.checkpoint(a.ckpt_path, a.ckpt_strategy)
            if rep.status == "running":
                rep = self.s.wait_checkpoint()
            if rep.status != "done":
                raise SystemExit(f"ERR {rep.error} {rep.detail}")
            print(f"CKPT {it + 1} {a.ckpt_path} pause_ms={rep.pause_time * 1e3:.1f}", flush=True)
            if a.exit_after_ckpt:
                self.s.close()
                sys.stdout.flush()
                raise SystemExit(0)


def dotprod_setup(s, n, seed=1, redundancy=0.0):
    """Two managed vectors of ``n`` float32 values and a result cell."""
    rng = np.random.default_rng(seed)
    a = s.malloc_managed(n * 4)
    b = s.malloc_managed(n * 4)
    out = s.malloc_managed(4)
    const = int(n * redundancy)
    for region in (a, b):
        step = 1 << 22
        for i in range(0, n, step):
            m = min(step, n - i)
            vals = random_floats(rng, m)
            lo, hi = i, i + m
            if lo < const:
                vals[:min(hi, const) - lo] = 1.0
            region.write(i * 4, vals)
    return a, b, out


def run_dotprod(s, args, redundancy=0.0):
    p = Progress(s, args)
    if p.resumed:
        a, b, out = p.regions()
    else:
        a, b, out = dotprod_setup(s, args.n, args.seed, redundancy)
    for it in range(p.start, args.iters):
        s.launch("dot", [a, b, out])
        s.synchronize()
        v = float(out.array(np.float32)[0])
        p.extra += v
        # perturb one element so successive iterations differ
        a.array(np.float32)[it % args.n] = np.float32(0.5)
        p.done(it)
    return f"{checksum([a, b, out])} dot={p.extra:.6e}"


def run_redundant(s, args):
    return run_dotprod(s, args, args.redundancy)


def run_tinyker(s, args):
    """Many small regions, thousands of short kernels, frequent host touches."""
    p = Progress(s, args)
    rng = np.random.default_rng(args.seed)
    if p.resumed:
        regs = p.regions()
    else:
        sizes = rng.integers(3, 33, size=args.regions) * 4096      # 12 KiB .. 128 KiB
        regs = []
        for size in sizes:
            r = s.malloc_managed(int(size))
            r.array(np.float32)[:] = rng.random(int(size) // 4, dtype=np.float32)
            regs.append(r)
    n = len(regs)
    for it in range(p.start, args.iters):
        for i in range(n):
            j = (i + 1) % n
            s.launch("saxpy", [regs[i], regs[j]], [0.25])
            s.launch("scale", [regs[j]], [0.8])
            s.launch("sleep_us", [], [args.kernel_us])
        s.synchronize()
        for k in range(0, n, max(1, n // 8)):
            r = regs[(k + it) % n].array(np.float32)
            head = r[0:4]
            r[1] = head[0] * np.float32(0.5) + np.float32(it)
        p.done(it)
    return checksum(regs)


def run_bigreg(s, args):
    """A few large regions, about a hundred kernels per second."""
    p = Progress(s, args)
    n = args.region_mib * (1 << 20) // 4
    if p.resumed:
        x, y, tmp = p.regions()
    else:
        rng = np.random.default_rng(args.seed)
        x = s.malloc_managed(n * 4)
        y = s.malloc_managed(n * 4)
        tmp = s.malloc_managed(n * 4)
        x.write(0, rng.random(n, dtype=np.float32))
        y.write(0, rng.random(n, dtype=np.float32))
    for it in range(p.start, args.iters):
        s.launch("stencil3", [x, tmp])
        s.launch("saxpy", [x, y], [0.1])
        s.launch("scale", [y], [0.9])
        s.launch("sleep_us", [], [args.kernel_us])
        s.synchronize()
        head = y.array(np.float32)[0:16]
        x.array(np.float32)[it % n] = head.sum(dtype=np.float32)
        p.done(it)
    return checksum([x, y, tmp])


def run_violator(s, args):
    """Writes one page then reads another page of the same region with no device call between."""
    ps = s.page_size
    r = s.malloc_managed(4 * ps)
    s.launch("fill", [r], [1.0])
    s.synchronize()
    r.write(0, np.float32(2.0).tobytes())                    # page A
    v = float(np.frombuffer(r.read(2 * ps, 4), np.float32)[0])  # page B
    s.synchronize()
    return f"{checksum([r])} read={v}"


WORKLOADS = {
    "dotprod": run_dotprod,
    "tinyker": run_tinyker,
    "bigreg": run_bigreg,
    "redundant": run_redundant,
    "violator": run_violator,
}


def build_parser():
    p = _Parser(prog="crum-workload", description="bundled crum applications")
    p.add_argument("workload", choices=sorted(WORKLOADS))
    p.add_argument("--iters", type=int, default=None, help="iterations to run")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--n", type=int, default=1 << 26,
                   help="dotprod/redundant vector length (default: two 256 MiB vectors)")
    p.add_argument("--redundancy", type=float, default=0.5, help="redundant: constant fraction")
    p.add_argument("--regions", type=int, default=64, help="tinyker: number of regions")
    p.add_argument("--region-mib", type=int, default=64, help="bigreg: MiB per region")
    p.add_argument("--kernel-us", type=float, default=20.0, help="simulated kernel duration")
    p.add_argument("--ckpt-at", type=int, default=None, help="checkpoint after this iteration")
    p.add_argument("--ckpt-path", default="crum.img")
    p.add_argument("--ckpt-strategy", default="naive")
    p.add_argument("--exit-after-ckpt", action="store_true",
                   help="stop right after the checkpoint (as if the job were killed)")
    p.add_argument("--check-isolation", action="store_true",
                   help="verify after every iteration that the device arena is not mapped here")
    return p


_DEFAULT_ITERS = {"dotprod": 1, "redundant": 1, "tinyker": 20, "bigreg": 20, "violator": 1}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"ERR Usage {message}\n")


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.iters is None:
        args.iters = _DEFAULT_ITERS[args.workload]
    s = None
    try:
        s = crum_init()
        result = WORKLOADS[args.workload](s, args)
        if args.check_isolation and not arena_isolated():
            print("ERR IsolationBroken application maps the device arena", file=sys.stderr)
            return 1
        s.close()
    except CrumError as e:
        print(f"ERR {e.code} {e}", file=sys.stderr, flush=True)
        if s is not None:
            try:
                s.close()
            except CrumError:
                pass
        return 1
    print(f"RESULT {result}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
