import os
import subprocess
import sys
import time

import pytest

from conftest import run_cli

BIGREG = ["bigreg", "--iters", "6", "--region-mib", "1", "--kernel-us", "100"]


def result_line(out):
    lines = [ln for ln in out.splitlines() if ln.startswith("RESULT ")]
    assert len(lines) == 1, out
    return lines[0]


def test_run_dotprod():
    p = run_cli("run", "--", "dotprod", "--n", "65536")
    assert p.returncode == 0, p.stderr
    assert result_line(p.stdout)


def test_usage_errors():
    p = run_cli()
    assert p.returncode == 2 and p.stderr.startswith("ERR Usage")
    p = run_cli("run")
    assert p.returncode == 2 and p.stderr.startswith("ERR Usage")
    p = run_cli("ckpt", "--strategy", "zip", "x.img")
    assert p.returncode == 2 and p.stderr.startswith("ERR Usage")


def test_dead_proxy_binary():
    p = run_cli("run", "--", "dotprod", "--n", "1024", env={"CRUM_PROXY_CMD": "/bin/false"})
    assert p.returncode != 0
    assert p.stderr.strip().splitlines()[-1].startswith("ERR NoProxy")


def test_missing_application():
    p = run_cli("run", "--", "/no/such/app")
    assert p.returncode != 0 and "ERR AppFailed" in p.stderr


def test_app_without_launcher():
    p = subprocess.run([sys.executable, "-m", "crum.workloads", "dotprod", "--n", "16"],
                       capture_output=True, text=True,
                       env={k: v for k, v in os.environ.items() if k != "CRUM_SHM_NAME"})
    assert p.returncode == 1 and p.stderr.startswith("ERR NoProxy")


def test_verified_mode_flags_violator():
    p = run_cli("run", "--mode", "verified", "--", "violator")
    assert p.returncode != 0
    assert p.stderr.strip().splitlines()[-1].startswith("ERR CycleViolation")
    p = run_cli("run", "--", "violator")
    assert p.returncode == 0 and p.stderr == ""


def test_restart_missing_image(tmp_path):
    p = run_cli("restart", str(tmp_path / "none.img"), "--", *BIGREG)
    assert p.returncode != 0 and p.stderr.startswith("ERR NoImage")


def test_restart_corrupt_image(tmp_path):
    bad = tmp_path / "bad.img"
    bad.write_bytes(b"CRUM" + b"\0" * 60)
    p = run_cli("restart", str(bad), "--", *BIGREG)
    assert p.returncode != 0 and "ERR CrcMismatch" in p.stderr


@pytest.mark.parametrize("strategy", ["naive", "forked"])
def test_ckpt_mid_run_then_restart_matches_golden(tmp_path, strategy):
    golden = run_cli("run", "--", *BIGREG)
    assert golden.returncode == 0, golden.stderr
    img = str(tmp_path / "b.img")
    p = run_cli("run", "--", *BIGREG, "--ckpt-at", "3", "--ckpt-path", img,
                "--ckpt-strategy", strategy, "--exit-after-ckpt")
    assert p.returncode == 0, p.stderr
    assert "RESULT" not in p.stdout and os.path.exists(img)
    r = run_cli("restart", img, "--", *BIGREG)
    assert r.returncode == 0, r.stderr
    assert result_line(r.stdout) == result_line(golden.stdout)


def test_stats_show_passive_proxy():
    p = run_cli("run", "--stats", "--", *BIGREG)
    assert p.returncode == 0
    line = [ln for ln in p.stderr.splitlines() if ln.startswith("PROXY ")][0]
    fields = dict(kv.split("=") for kv in line.split()[1:])
    assert fields["requests"] == fields["replies"] and int(fields["requests"]) > 0


def test_ckpt_without_session(tmp_path):
    p = run_cli("ckpt", "--session", "nobody", str(tmp_path / "x.img"))
    assert p.returncode != 0 and p.stderr.startswith("ERR NoSession")


def _wait_for(path, timeout=30):
    deadline = time.monotonic() + timeout
    while not os.path.exists(path):
        assert time.monotonic() < deadline, f"{path} never appeared"
        time.sleep(0.05)


def test_control_socket_checkpoint_and_concurrent_refusal(tmp_path):
    sid = f"t{os.getpid()}"
    env = dict(os.environ)
    env["CRUM_STORE_THROTTLE_MBPS"] = "4"      # keep the forked writer alive for a while
    app = subprocess.Popen(
        [sys.executable, "-m", "crum.cli", "run", "--session-id", sid, "--",
         "bigreg", "--iters", "400", "--region-mib", "2", "--kernel-us", "5000"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=env)
    try:
        _wait_for(os.path.join(os.environ["CRUM_SOCKET_DIR"], f"crum-{sid}.sock"))
        first = subprocess.Popen(
            [sys.executable, "-m", "crum.cli", "ckpt", "--session", sid, "--strategy", "forked",
             str(tmp_path / "a.img")], stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
        # the first request is taken at the application's next call and its child starts writing
        time.sleep(1.0)
        second = run_cli("ckpt", "--session", sid, "--strategy", "forked", str(tmp_path / "b.img"))
        assert second.returncode != 0
        assert second.stderr.startswith("ERR ConcurrentCheckpoint"), second.stderr
        out, err = first.communicate(timeout=120)
        assert first.returncode == 0, err
        _, pause, total, nbytes = out.split()
        assert float(total) >= float(pause) and int(nbytes) == os.path.getsize(tmp_path / "a.img")
        third = run_cli("ckpt", "--session", sid, "--strategy", "naive", str(tmp_path / "c.img"),
                        env={"CRUM_STORE_THROTTLE_MBPS": "0"})
        assert third.returncode == 0, third.stderr
        assert third.stdout.startswith("OK ")
    finally:
        app.terminate()
        app.wait(30)


def test_bad_request_on_socket(tmp_path):
    import socket
    from crum.cli import ControlServer
    from crum.wire import ControlArea
    server = ControlServer(str(tmp_path / "s.sock"), ControlArea.__new__(ControlArea), lambda: False)
    assert server.handle("HELLO\n") == "ERR BadRequest\n"
    assert server.handle("CKPT zip /tmp/x\n") == "ERR InvalidArgument\n"
    server.sock.close()
