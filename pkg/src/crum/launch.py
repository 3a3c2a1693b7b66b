"""Creating shared regions and spawning proxies."""

import os
import shlex
import subprocess
import sys
import time
import uuid

from .errors import NoProxy
from .wire import (
    BULK_MODES,
    DEFAULT_DEPTH,
    DEFAULT_SLOTS,
    STATE_READY,
    SharedRegion,
    default_shm_name,
)


def new_session_id():
    return f"{os.getpid()}-{uuid.uuid4().hex[:8]}"


def proxy_command(shm_name):
    custom = os.environ.get("CRUM_PROXY_CMD")
    base = shlex.split(custom) if custom else [sys.executable, "-m", "crum.proxy"]
    return base + ["--shm", shm_name]


class ProxyProcess:
    """A running proxy plus the shared region it serves."""

    def __init__(self, session_id, region, proc):
        self.session_id = session_id
        self.region = region
        self.proc = proc

    @property
    def shm_name(self):
        return self.region.name

    @property
    def pid(self):
        return self.proc.pid

    def alive(self):
        return self.proc.poll() is None

    def stop(self, timeout=5.0):
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        self.region.unlink()
        self.region.close()
        return self.proc.returncode

    def wait(self, timeout=None):
        return self.proc.wait(timeout)


def start_proxy(session_id=None, depth=None, bulk_mode=None, env=None, timeout=30.0,
                scratch_size=None):
    """Create the shared region and spawn a proxy; returns once it is serving."""
    session_id = session_id or new_session_id()
    depth = depth or int(os.environ.get("CRUM_PIPELINE_DEPTH", DEFAULT_DEPTH))
    mode = bulk_mode or os.environ.get("CRUM_BULK_MODE", "single-copy")
    if mode not in BULK_MODES:
        raise ValueError(f"unknown bulk mode {mode!r}")
    kw = {} if scratch_size is None else {"scratch_size": scratch_size}
    name = (env or {}).get("CRUM_SHM_NAME") or default_shm_name(session_id)
    try:
        region = SharedRegion.create(name, nslots=DEFAULT_SLOTS, depth=depth,
                                     bulk_mode=BULK_MODES[mode], **kw)
    except FileExistsError:
        raise NoProxy(f"shared region {name!r} already exists (another session is using it)") from None
    cmd = proxy_command(region.name)
    try:
        proc = subprocess.Popen(cmd, env=env, stdin=subprocess.DEVNULL)
    except OSError as e:
        region.unlink()
        region.close()
        raise NoProxy(f"cannot start proxy {cmd[0]!r}: {e.strerror}") from e
    deadline = time.monotonic() + timeout
    while region.proxy_state != STATE_READY:
        if proc.poll() is not None or time.monotonic() > deadline:
            if proc.poll() is None:
                proc.kill()
            proc.wait()
            region.unlink()
            region.close()
            raise NoProxy(f"proxy exited with status {proc.returncode} before serving")
        time.sleep(0.005)
    return ProxyProcess(session_id, region, proc)
