"""miniflow command line.

Dataflow commands: new, build, run, start, stop, list, logs.
System commands: up, destroy, check, coordinator, daemon, graph.

stdout carries data (uuids, rows, graphs, logs), stderr carries
diagnostics; every command exits 0 on success and nonzero on any error,
so the CLI scripts cleanly. `list` and `check` also offer --format
json-lines for machine consumption.
"""

from __future__ import annotations

import argparse
import json
import os
import socket
import subprocess
import sys
import time
import webbrowser
from pathlib import Path

import psutil

from . import dfspec, errors, proto
from .coordinator import DEFAULT_PORT, Coordinator, CoordinatorConfig
from .daemon import Daemon, DaemonConfig

ENV_COORDINATOR = "MINIFLOW_COORDINATOR_ADDR"
ENV_HOME = "MINIFLOW_HOME"


def home_dir() -> Path:
    return Path(os.environ.get(ENV_HOME) or Path.home() / ".miniflow")


def resolve_coordinator_addr(flag: str | None) -> str:
    if flag:
        return flag
    env = os.environ.get(ENV_COORDINATOR)
    if env:
        return env
    addr_file = home_dir() / "coordinator.addr"
    if addr_file.exists():
        return addr_file.read_text().strip()
    return f"127.0.0.1:{DEFAULT_PORT}"


def request(addr: str, verb: proto.CliVerb, args: tuple[str, ...] = ()) -> proto.CliReply:
    host, port = addr.rsplit(":", 1)
    try:
        sock = socket.create_connection((host, int(port)), timeout=60.0)
    except OSError as exc:
        raise errors.CliError(f"coordinator at {addr} is not reachable: {exc}") from None
    stream = proto.SocketStream(sock)
    try:
        stream.write_message(proto.CliRequest(verb, args))
        sock.settimeout(None)
        reply = stream.read_message(120.0)
    except errors.ProtocolError as exc:
        raise errors.CliError(f"coordinator connection failed: {exc}") from None
    finally:
        stream.close()
    if reply is None:
        raise errors.CliError("coordinator did not reply in time")
    return reply


def expect_ok(reply: proto.CliReply) -> proto.CliReply:
    if not reply.ok:
        detail = reply.items[0] if reply.items else "unknown error"
        raise errors.CliError(str(detail))
    return reply


# --- system commands -----------------------------------------------------------


def _pid_alive(pid_file: Path) -> int | None:
    if not pid_file.exists():
        return None
    try:
        pid = int(pid_file.read_text().strip())
    except ValueError:
        return None
    return pid if psutil.pid_exists(pid) else None


def _spawn_service(args: list[str], log_path: Path) -> int:
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "ab") as log:
        proc = subprocess.Popen(
            [sys.executable, "-m", "miniflow.cli", *args],
            stdout=log,
            stderr=subprocess.STDOUT,
            start_new_session=True,
        )
    return proc.pid


def cmd_up(opts) -> int:
    home = home_dir()
    home.mkdir(parents=True, exist_ok=True)
    if _pid_alive(home / "coordinator.pid") or _pid_alive(home / "daemon.pid"):
        raise errors.AlreadyRunning(f"miniflow services are already running (state in {home})")
    addr = f"127.0.0.1:{opts.port}"
    coord_pid = _spawn_service(
        ["coordinator", "--port", str(opts.port), "--bind-addr", "127.0.0.1", "--state-dir", str(home)],
        home / "coordinator.log",
    )
    (home / "coordinator.pid").write_text(str(coord_pid))
    (home / "coordinator.addr").write_text(addr)
    if not _wait_for(lambda: _check_alive(addr)[0], 10.0):
        raise errors.CliError("coordinator did not come up within 10s (see coordinator.log)")
    daemon_pid = _spawn_service(
        [
            "daemon",
            "--machine-id", opts.machine_id,
            "--coordinator-addr", addr,
            "--inter-daemon-port", "0",
            "--run-dir", str(home / "run"),
            "--exit-with-coordinator",
        ],
        home / "daemon.log",
    )
    (home / "daemon.pid").write_text(str(daemon_pid))
    if not _wait_for(lambda: _check_alive(addr) == (True, True), 15.0):
        raise errors.CliError("daemon did not register within 15s (see daemon.log)")
    print(f"coordinator running at {addr} (pid {coord_pid})")
    print(f"daemon '{opts.machine_id}' running (pid {daemon_pid})")
    return 0


def _wait_for(predicate, timeout: float) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.1)
    return False


def _check_alive(addr: str) -> tuple[bool, bool]:
    """(coordinator reachable, at least one daemon registered)."""
    try:
        reply = request(addr, proto.CliVerb.CHECK)
    except errors.CliError:
        return (False, False)
    if not reply.ok:
        return (False, False)
    daemons = [json.loads(i) for i in reply.items if isinstance(i, str)]
    return (True, any(d.get("component") == "daemon" for d in daemons))


def cmd_destroy(opts) -> int:
    home = home_dir()
    coord_pid = _pid_alive(home / "coordinator.pid")
    daemon_pid = _pid_alive(home / "daemon.pid")
    if coord_pid is None and daemon_pid is None:
        raise errors.NotRunning("no running miniflow services found")
    addr = resolve_coordinator_addr(opts.coordinator)
    try:
        request(addr, proto.CliVerb.DESTROY)
    except errors.CliError:
        pass  # fall back to signals
    for pid in (daemon_pid, coord_pid):
        if pid is None:
            continue
        try:
            proc = psutil.Process(pid)
            proc.wait(timeout=5.0)
        except psutil.TimeoutExpired:
            proc.terminate()
            try:
                proc.wait(timeout=3.0)
            except psutil.TimeoutExpired:
                proc.kill()
        except psutil.NoSuchProcess:
            pass
    for name in ("coordinator.pid", "daemon.pid", "coordinator.addr"):
        (home / name).unlink(missing_ok=True)
    print("destroyed")
    return 0


def cmd_check(opts) -> int:
    addr = resolve_coordinator_addr(opts.coordinator)
    try:
        reply = request(addr, proto.CliVerb.CHECK)
        items = [json.loads(i) for i in reply.items if isinstance(i, str)] if reply.ok else []
    except errors.CliError:
        items = []
    coordinator_up = any(i.get("component") == "coordinator" for i in items)
    daemons = [i for i in items if i.get("component") == "daemon"]
    if opts.format == "json-lines":
        if not coordinator_up:
            print(json.dumps({"component": "coordinator", "running": False}))
        if not daemons:
            print(json.dumps({"component": "daemon", "running": False}))
        for item in items:
            print(json.dumps(item, sort_keys=True))
    else:
        print(f"coordinator: {'running at ' + addr if coordinator_up else 'not running'}")
        if daemons:
            for d in daemons:
                print(f"daemon[{d.get('machine')}]: running")
        else:
            print("daemon: not running")
    return 0 if coordinator_up and daemons else 1


def cmd_coordinator(opts) -> int:
    coordinator = Coordinator(
        CoordinatorConfig(
            port=opts.port,
            bind_host=opts.bind_addr,
            default_machine=opts.default_machine,
            keep_running=opts.keep_running,
            state_dir=opts.state_dir,
        )
    ).start()
    print(f"coordinator listening on {opts.bind_addr}:{coordinator.port}", file=sys.stderr)
    try:
        coordinator.wait_shutdown()
    except KeyboardInterrupt:
        coordinator.shutdown()
    return 0


def cmd_daemon(opts) -> int:
    daemon = Daemon(
        DaemonConfig(
            machine_id=opts.machine_id,
            coordinator_addr=opts.coordinator_addr,
            inter_daemon_port=opts.inter_daemon_port,
            run_dir=opts.run_dir,
            max_free_bytes=opts.max_free_bytes,
            inline_threshold=opts.inline_threshold,
            exit_with_coordinator=opts.exit_with_coordinator,
        )
    ).start()
    print(f"daemon '{opts.machine_id}' running (data port {daemon.data_port})", file=sys.stderr)
    try:
        daemon.wait_shutdown()
    except KeyboardInterrupt:
        daemon.shutdown()
    return 0


# --- dataflow commands ------------------------------------------------------------


def cmd_start(opts) -> int:
    text = Path(opts.path).read_text()
    addr = resolve_coordinator_addr(opts.coordinator)
    reply = expect_ok(request(addr, proto.CliVerb.START, (text, opts.name or "")))
    print(reply.items[0])
    return 0


def cmd_stop(opts) -> int:
    addr = resolve_coordinator_addr(opts.coordinator)
    expect_ok(request(addr, proto.CliVerb.STOP, (opts.dataflow,)))
    print(f"stopped {opts.dataflow}")
    return 0


def cmd_list(opts) -> int:
    addr = resolve_coordinator_addr(opts.coordinator)
    reply = expect_ok(request(addr, proto.CliVerb.LIST))
    rows = [json.loads(i) for i in reply.items]
    if opts.format == "json-lines":
        for row in rows:
            print(json.dumps(row, sort_keys=True))
        return 0
    if not rows:
        print("no dataflows")
        return 0
    fmt = "{:<36}  {:<16}  {:<9}  {:<20}  {}"
    print(fmt.format("UUID", "NAME", "PHASE", "MACHINES", "STARTED"))
    for row in rows:
        print(fmt.format(row["uuid"], row["name"] or "-", row["phase"], ",".join(row["machines"]), row["started_at"]))
    return 0


def cmd_logs(opts) -> int:
    addr = resolve_coordinator_addr(opts.coordinator)
    reply = expect_ok(request(addr, proto.CliVerb.LOGS, (opts.dataflow, opts.node)))
    sys.stdout.write(str(reply.items[0]))
    return 0


def cmd_run(opts) -> int:
    path = Path(opts.path)
    spec = dfspec.parse(path.read_text())
    diagnostics = dfspec.validate(spec)
    for d in diagnostics:
        if d.severity == "warning":
            print(str(d), file=sys.stderr)
    if dfspec.has_errors(diagnostics):
        for d in diagnostics:
            if d.severity == "error":
                print(str(d), file=sys.stderr)
        raise errors.CliError("dataflow spec is invalid")
    if any(n.machine for n in spec.nodes):
        raise errors.MachinesRequireCoordinator(
            "this dataflow places nodes on machines; use 'miniflow start' against a coordinator"
        )
    daemon = Daemon(DaemonConfig(machine_id="local", run_dir=opts.run_dir)).start()
    interrupted = False
    try:
        uuid = daemon.run_dataflow(spec, workdir=str(path.resolve().parent))
        print(f"running dataflow {uuid}", file=sys.stderr)
        ok = daemon.wait_dataflow(uuid, timeout=None)
    except KeyboardInterrupt:
        interrupted = True
        ok = False
        print("interrupted, stopping dataflow", file=sys.stderr)
    finally:
        daemon.shutdown()
    if interrupted:
        return 130
    if not ok:
        print("one or more nodes failed; see logs under " + str(daemon.run_dir), file=sys.stderr)
        return 1
    return 0


def cmd_graph(opts) -> int:
    spec = dfspec.parse(Path(opts.path).read_text())
    mermaid = dfspec.graph_export(spec)
    if opts.open:
        html_path = Path(opts.path).with_suffix(".html")
        html_path.write_text(_HTML_WRAPPER.replace("__GRAPH__", mermaid))
        print(f"wrote {html_path}")
        webbrowser.open(html_path.resolve().as_uri())
    else:
        sys.stdout.write(mermaid)
    return 0


def cmd_build(opts) -> int:
    path = Path(opts.path)
    spec = dfspec.parse(path.read_text())
    for node in spec.nodes:
        if not node.build:
            continue
        print(f"building {node.id}: {node.build}", file=sys.stderr)
        result = subprocess.run(node.build, shell=True, cwd=path.resolve().parent)
        if result.returncode != 0:
            raise errors.BuildFailed(node.id, f"command exited with {result.returncode}")
    return 0


def cmd_new(opts) -> int:
    target = Path(opts.name)
    if target.exists():
        raise errors.TemplateExists(f"{target} already exists")
    target.mkdir(parents=True)
    if opts.kind == "project":
        (target / "dataflow.yml").write_text(_PROJECT_SPEC)
        (target / "publisher.py").write_text(_PUBLISHER_TEMPLATE)
        (target / "subscriber.py").write_text(_SUBSCRIBER_TEMPLATE)
        print(f"created project {target}: run it with 'miniflow run {target / 'dataflow.yml'}'")
    else:
        (target / "node.py").write_text(_NODE_TEMPLATE)
        print(f"created node template {target / 'node.py'}")
    return 0


_HTML_WRAPPER = """<!DOCTYPE html>
<html>
<body>
<pre class="mermaid">
__GRAPH__
</pre>
<script type="module">
import mermaid from "https://cdn.jsdelivr.net/npm/mermaid@10/dist/mermaid.esm.min.mjs";
mermaid.initialize({ startOnLoad: true });
</script>
</body>
</html>
"""

_PROJECT_SPEC = """nodes:
  - id: publisher
    path: python3 publisher.py
    env:
      PUBLISH_LIMIT: "20"
    inputs:
      tick: dora/timer/millis/50
    outputs:
      - data
  - id: subscriber
    path: python3 subscriber.py
    inputs:
      data: publisher/data
"""

_PUBLISHER_TEMPLATE = '''"""Publisher: sends a payload on every timer tick."""

import os

from miniflow import Node


def main():
    limit = int(os.environ.get("PUBLISH_LIMIT", "0") or 0)
    node = Node()
    sent = 0
    for event in node:
        if event["type"] == "INPUT" and event["id"] == "tick":
            node.send_output("data", b"payload %d" % sent, {"note": "hello"})
            sent += 1
            if limit and sent >= limit:
                break
    node.close()


if __name__ == "__main__":
    main()
'''

_SUBSCRIBER_TEMPLATE = '''"""Subscriber: reads each message in place."""

from miniflow import Node


def main():
    node = Node()
    for event in node:
        if event["type"] == "INPUT":
            print(f"{event['id']}: {len(event['value'])} bytes, metadata={event.metadata}")
            event.release()
    node.close()


if __name__ == "__main__":
    main()
'''

_NODE_TEMPLATE = '''"""Generic node template: relays every input to an output."""

from miniflow import Node


def main():
    node = Node()
    for event in node:
        if event["type"] == "INPUT":
            # do useful work here; this template forwards the payload
            if node.outputs:
                node.send_output(node.outputs[0], bytes(event["value"]), dict(event.metadata))
            event.release()
    node.close()


if __name__ == "__main__":
    main()
'''


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="miniflow", description="dataflow middleware CLI")
    sub = parser.add_subparsers(dest="command", required=True)

    def coordinator_flag(p):
        p.add_argument("--coordinator", help="coordinator address host:port "
                       f"(default: $MINIFLOW_COORDINATOR_ADDR, then 127.0.0.1:{DEFAULT_PORT})")

    p = sub.add_parser("up", help="spawn coordinator and daemon in local mode")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--machine-id", default="local")
    p.set_defaults(fn=cmd_up)

    p = sub.add_parser("destroy", help="destroy running coordinator and daemon")
    coordinator_flag(p)
    p.set_defaults(fn=cmd_destroy)

    p = sub.add_parser("check", help="check if the coordinator and the daemon are running")
    coordinator_flag(p)
    p.add_argument("--format", choices=("table", "json-lines"), default="table")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("coordinator", help="run a coordinator in the foreground")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--bind-addr", default="127.0.0.1")
    p.add_argument("--default-machine", default="local")
    p.add_argument("--keep-running", action="store_true",
                   help="keep dataflows running when a node fails")
    p.add_argument("--state-dir", default=None)
    p.set_defaults(fn=cmd_coordinator)

    p = sub.add_parser("daemon", help="run a daemon in the foreground")
    p.add_argument("--machine-id", default="local")
    p.add_argument("--coordinator-addr", default=None)
    p.add_argument("--inter-daemon-port", type=int, default=53291)
    p.add_argument("--run-dir", default=None)
    p.add_argument("--max-free-bytes", type=int, default=256 * 1024 * 1024)
    p.add_argument("--inline-threshold", type=int, default=4096)
    p.add_argument("--exit-with-coordinator", action="store_true")
    p.set_defaults(fn=cmd_daemon)

    p = sub.add_parser("new", help="generate a new project or node")
    p.add_argument("kind", choices=("project", "node"))
    p.add_argument("name")
    p.set_defaults(fn=cmd_new)

    p = sub.add_parser("build", help="run build commands declared in the dataflow")
    p.add_argument("path")
    p.set_defaults(fn=cmd_build)

    p = sub.add_parser("run", help="run a dataflow locally without a coordinator")
    p.add_argument("path")
    p.add_argument("--run-dir", default=None)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("start", help="start a dataflow via the coordinator")
    p.add_argument("path")
    p.add_argument("--name", default=None)
    coordinator_flag(p)
    p.set_defaults(fn=cmd_start)

    p = sub.add_parser("stop", help="stop a dataflow by uuid or name")
    p.add_argument("dataflow")
    coordinator_flag(p)
    p.set_defaults(fn=cmd_stop)

    p = sub.add_parser("list", help="list dataflows")
    p.add_argument("--format", choices=("table", "json-lines"), default="table")
    coordinator_flag(p)
    p.set_defaults(fn=cmd_list)

    p = sub.add_parser("logs", help="show logs of a dataflow node")
    p.add_argument("dataflow")
    p.add_argument("node")
    coordinator_flag(p)
    p.set_defaults(fn=cmd_logs)

    p = sub.add_parser("graph", help="render the dataflow as a mermaid graph")
    p.add_argument("path")
    p.add_argument("--open", action="store_true", help="write an HTML wrapper and open it")
    p.set_defaults(fn=cmd_graph)

    return parser


def main(argv=None) -> int:
    opts = build_parser().parse_args(argv)
    try:
        return opts.fn(opts)
    except errors.MiniflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
