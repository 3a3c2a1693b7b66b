import os
import subprocess
import sys

import pytest

from crum.client import Session
from crum.launch import start_proxy

_ENV_KEYS = ["CRUM_ARENA_BYTES", "CRUM_PAGE_SIZE", "CRUM_SHM_NAME", "CRUM_PIPELINE_DEPTH",
             "CRUM_BULK_MODE", "CRUM_RESTART", "CRUM_MODE", "CRUM_SMALL_REGION_PAGES",
             "CRUM_COARSE_WRITE", "CRUM_STORE_THROTTLE_MBPS", "CRUM_PROXY_CMD",
             "CRUM_FAULT_DISK_FULL_AFTER", "CRUM_SESSION_ID", "CRUM_SOCKET_DIR"]


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
    for k in _ENV_KEYS:
        monkeypatch.delenv(k, raising=False)
    monkeypatch.setenv("CRUM_SOCKET_DIR", str(tmp_path))


@pytest.fixture
def proxy():
    p = start_proxy()
    yield p
    p.stop()


def open_session(env=None, **kw):
    """Start a proxy (with extra env) and attach a session; returns (proxy, session)."""
    penv = dict(os.environ)
    penv.update(env or {})
    p = start_proxy(env=penv, bulk_mode=penv.get("CRUM_BULK_MODE"))
    try:
        s = Session(p.region, **kw)
    except BaseException:
        p.stop()
        raise
    return p, s


@pytest.fixture
def session():
    p, s = open_session()
    yield s
    s.close(shutdown=True)
    p.stop()


@pytest.fixture
def make_session():
    opened = []

    def make(env=None, **kw):
        p, s = open_session(env, **kw)
        opened.append((p, s))
        return s

    yield make
    for p, s in reversed(opened):
        try:
            s.close(shutdown=True)
        except Exception:
            pass
        p.stop()


def run_cli(*args, env=None, timeout=300):
    full = dict(os.environ)
    full.update(env or {})
    return subprocess.run([sys.executable, "-m", "crum.cli", *args], capture_output=True,
                          text=True, env=full, timeout=timeout)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = mod.pytest_terminal_lines() if mod is not None else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
