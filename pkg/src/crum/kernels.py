"""Built-in kernel registry.

Kernels are plain host functions over float32 views of region bytes. The
simulated device and the test oracles call the very same functions, so a
kernel's effect is defined exactly once.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

_DOT_CHUNK = 1 << 20


def as_f32(mem):
    """float32 view over the whole 4-byte words of a uint8 buffer."""
    n = len(mem) // 4
    return mem[: n * 4].view(np.float32)


def fill(regions, scalars):
    as_f32(regions[0])[:] = np.float32(scalars[0])


def scale(regions, scalars):
    x = as_f32(regions[0])
    x *= np.float32(scalars[0])


def saxpy(regions, scalars):
    # y <- a*x + y over the common prefix
    x, y = as_f32(regions[0]), as_f32(regions[1])
    n = min(len(x), len(y))
    y[:n] = np.float32(scalars[0]) * x[:n] + y[:n]


def dot(regions, scalars):
    a, b, out = as_f32(regions[0]), as_f32(regions[1]), as_f32(regions[2])
    n = min(len(a), len(b))
    # fixed chunking keeps the reduction order independent of buffer alignment
    total = 0.0
    for lo in range(0, n, _DOT_CHUNK):
        hi = min(lo + _DOT_CHUNK, n)
        total += float(np.multiply(a[lo:hi], b[lo:hi], dtype=np.float64).sum())
    if len(out):
        out[0] = np.float32(total)


def stencil3(regions, scalars):
    x, tmp = as_f32(regions[0]), as_f32(regions[1])
    n = len(x)
    if n < 3 or len(tmp) < n:
        return
    tmp[0], tmp[n - 1] = x[0], x[n - 1]
    np.add(x[:-2], x[1:-1], out=tmp[1:n - 1])
    tmp[1:n - 1] += x[2:]
    tmp[1:n - 1] /= np.float32(3.0)
    x[:] = tmp[:n]


def sleep_us(regions, scalars):
    # no effect on memory; the device charges the duration to wall time
    return float(scalars[0])


@dataclass(frozen=True)
class KernelSpec:
    fn: Callable
    n_regions: int
    n_scalars: int


REGISTRY = {
    "fill": KernelSpec(fill, 1, 1),
    "scale": KernelSpec(scale, 1, 1),
    "saxpy": KernelSpec(saxpy, 2, 1),
    "dot": KernelSpec(dot, 3, 0),
    "stencil3": KernelSpec(stencil3, 2, 0),
    "sleep_us": KernelSpec(sleep_us, 0, 1),
}


def run(name, regions, scalars):
    """Apply kernel ``name`` in place; returns simulated duration in microseconds.

    Overflow and NaN results are ordinary IEEE outcomes on a device, not warnings.
    """
    with np.errstate(all="ignore"):
        return REGISTRY[name].fn(regions, scalars) or 0.0
