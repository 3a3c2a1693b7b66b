"""``crum``: launcher, checkpoint trigger, restart tool and benchmark driver.

    crum run [--mode verified] [--pipeline-depth N] -- <app> [app-args]
    crum ckpt --strategy forked|naive|gzip|pgzip|lz4 [--session ID] <image>
    crum restart <image> -- <app> [app-args]
    crum bench [--workloads dotprod,redundant] [--strategies naive,forked] [--csv out.csv]

The launcher owns the proxy and a control socket. ``crum ckpt`` talks to that
socket with one line per request::

    CKPT <strategy> <path>\\n   ->   OK <pause_ms> <total_ms> <bytes>\\n | ERR <code>\\n

Every failure exits nonzero after printing a single ``ERR <Code> <message>``
line on stderr.
"""

import argparse
import glob
import logging
import os
import shutil
import signal
import socket
import subprocess
import sys
import tempfile
import threading
import time

from .ckpt import STRATEGIES
from .errors import CrumError, NoProxy
from .launch import new_session_id, start_proxy
from .wire import BULK_MODES, ControlArea

log = logging.getLogger("crum")

EXIT_FAIL = 1
EXIT_USAGE = 2


def socket_dir():
    return os.environ.get("CRUM_SOCKET_DIR", tempfile.gettempdir())


def socket_path(session_id):
    return os.path.join(socket_dir(), f"crum-{session_id}.sock")


def fail(code, msg, status=EXIT_FAIL):
    print(f"ERR {code} {msg}", file=sys.stderr, flush=True)
    return status


def app_command(argv):
    """Bundled workload names run through the current interpreter."""
    from .workloads import WORKLOADS
    if argv and argv[0] in WORKLOADS and shutil.which(argv[0]) is None:
        return [sys.executable, "-m", "crum.workloads"] + argv
    return argv


class Parser(argparse.ArgumentParser):
    """Usage errors also follow the ``ERR <Code> <message>`` convention."""

    def error(self, message):
        self.exit(EXIT_USAGE, f"ERR Usage {message}\n")


class ControlServer:
    """Accepts ``CKPT`` lines on a local socket and relays them to the application."""

    def __init__(self, path, control, app_alive, timeout=None):
        self.path = path
        self.control = control
        self.app_alive = app_alive
        self.timeout = timeout or float(os.environ.get("CRUM_CKPT_TIMEOUT", 3600))
        # at most one request may be waiting for the application to take it
        self.posting = threading.Lock()
        self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        if os.path.exists(path):
            os.unlink(path)
        self.sock.bind(path)
        self.sock.listen(8)
        self.sock.settimeout(0.1)
        self.stopping = threading.Event()
        self.thread = threading.Thread(target=self._accept_loop, name="crum-control", daemon=True)

    def start(self):
        self.thread.start()

    def stop(self):
        self.stopping.set()
        self.thread.join(2.0)
        self.sock.close()
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass

    def _accept_loop(self):
        while not self.stopping.is_set():
            try:
                conn, _ = self.sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn):
        with conn:
            conn.settimeout(self.timeout)
            try:
                line = conn.makefile("r").readline()
                conn.sendall(self.handle(line).encode())
            except OSError as e:
                log.warning("control connection failed: %s", e)

    def _until(self, pred):
        deadline = time.monotonic() + self.timeout
        while not pred():
            if not self.app_alive():
                return "AppExited"
            if time.monotonic() > deadline:
                return "Timeout"
            time.sleep(0.002)
        return None

    def handle(self, line):
        parts = line.split()
        if len(parts) != 3 or parts[0] != "CKPT":
            return "ERR BadRequest\n"
        strategy, path = parts[1], os.path.abspath(parts[2])
        if strategy not in STRATEGIES:
            return "ERR InvalidArgument\n"
        with self.posting:
            seq = self.control.request(strategy, path)
            err = self._until(lambda: self.control.acked(seq))
        if err is None:
            err = self._until(lambda: self.control.result(seq) is not None)
        if err is not None:
            return f"ERR {err}\n"
        status, pause, total, nbytes, code = self.control.result(seq)
        if status:
            return f"ERR {code or 'CheckpointFailed'}\n"
        return f"OK {pause:.3f} {total:.3f} {nbytes}\n"


def _launch(args, restart_image=None):
    app = list(args.app)
    if app and app[0] == "--":
        app = app[1:]
    if not app:
        return fail("Usage", "no application given (use: crum run -- <app> [args])", EXIT_USAGE)
    env = dict(os.environ)
    if args.mode:
        env["CRUM_MODE"] = args.mode
    if args.pipeline_depth:
        env["CRUM_PIPELINE_DEPTH"] = str(args.pipeline_depth)
    if args.bulk_mode:
        env["CRUM_BULK_MODE"] = args.bulk_mode
    if args.arena_bytes:
        env["CRUM_ARENA_BYTES"] = str(args.arena_bytes)
    if args.coarse_write:
        env["CRUM_COARSE_WRITE"] = "1"
    if restart_image is not None:
        if not os.path.isfile(restart_image):
            return fail("NoImage", f"checkpoint image {restart_image!r} does not exist")
        env["CRUM_RESTART"] = os.path.abspath(restart_image)
    else:
        env.pop("CRUM_RESTART", None)
    sid = args.session_id or new_session_id()
    try:
        proxy = start_proxy(sid, args.pipeline_depth, args.bulk_mode, env=env)
    except (NoProxy, ValueError) as e:
        return fail("NoProxy", str(e))
    env["CRUM_SHM_NAME"] = proxy.shm_name
    env["CRUM_SESSION_ID"] = sid
    path = socket_path(sid)
    env["CRUM_CONTROL_SOCKET"] = path
    app_proc = None
    server = ControlServer(path, ControlArea(proxy.region), lambda: app_proc is not None
                           and app_proc.poll() is None)
    server.start()
    try:
        try:
            app_proc = subprocess.Popen(app_command(app), env=env)
        except OSError as e:
            return fail("AppFailed", f"cannot start {app[0]!r}: {e.strerror}")
        try:
            rc = app_proc.wait()
        except KeyboardInterrupt:
            app_proc.send_signal(signal.SIGINT)
            rc = app_proc.wait()
        published, completed, requests, replies = proxy.region.counters()
        if args.stats:
            print(f"PROXY requests={requests} replies={replies} published={published} "
                  f"completed={completed}", file=sys.stderr, flush=True)
        if rc < 0:
            return fail("AppKilled", f"application killed by signal {-rc}")
        return rc
    finally:
        server.stop()
        proxy.stop()


def cmd_run(args):
    return _launch(args)


def cmd_restart(args):
    return _launch(args, restart_image=args.image)


def _find_socket(args):
    if args.socket:
        return args.socket
    sid = args.session or os.environ.get("CRUM_SESSION_ID")
    if sid:
        return socket_path(sid)
    found = glob.glob(os.path.join(socket_dir(), "crum-*.sock"))
    if len(found) == 1:
        return found[0]
    return None


def cmd_ckpt(args):
    path = _find_socket(args)
    if path is None:
        return fail("NoSession", "give --session or --socket (zero or several sessions found)")
    try:
        with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as s:
            s.connect(path)
            s.sendall(f"CKPT {args.strategy} {os.path.abspath(args.image)}\n".encode())
            reply = s.makefile("r").readline().strip()
    except OSError as e:
        return fail("NoSession", f"cannot reach control socket {path}: {e.strerror}")
    if reply.startswith("OK "):
        print(reply, flush=True)
        return 0
    code = reply.split()[1] if len(reply.split()) > 1 else "NoReply"
    return fail(code, f"checkpoint to {args.image} failed")


def cmd_bench(args):
    from . import bench
    return bench.main_from_args(args)


def _add_launch_options(p):
    p.add_argument("--mode", choices=["normal", "verified"], default=None)
    p.add_argument("--pipeline-depth", type=int, default=None, metavar="N")
    p.add_argument("--bulk-mode", choices=sorted(BULK_MODES), default=None)
    p.add_argument("--arena-bytes", type=int, default=None, metavar="N")
    p.add_argument("--coarse-write", action="store_true",
                   help="grant write access region-wide on the first write fault")
    p.add_argument("--session-id", default=None)
    p.add_argument("--stats", action="store_true", help="print proxy message counters at exit")
    p.add_argument("app", nargs=argparse.REMAINDER, help="-- <app> [app-args]")


def build_parser():
    p = Parser(prog="crum", description="checkpoint-restart runtime launcher")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an application under a fresh proxy")
    _add_launch_options(run)
    run.set_defaults(func=cmd_run)

    ck = sub.add_parser("ckpt", help="ask a running application to checkpoint")
    ck.add_argument("--strategy", choices=sorted(STRATEGIES), default="forked")
    ck.add_argument("--session", default=None, help="session id printed by the launcher")
    ck.add_argument("--socket", default=None, help="control socket path")
    ck.add_argument("image")
    ck.set_defaults(func=cmd_ckpt)

    rs = sub.add_parser("restart", help="restart an application from a checkpoint image")
    rs.add_argument("image")
    _add_launch_options(rs)
    rs.set_defaults(func=cmd_restart)

    from .bench import add_arguments
    bn = sub.add_parser("bench", help="checkpoint strategy benchmarks")
    add_arguments(bn)
    bn.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    logging.basicConfig(level=os.environ.get("CRUM_LOG", "WARNING"),
                        format="crum %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CrumError as e:
        return fail(e.code, str(e))


if __name__ == "__main__":
    sys.exit(main())
