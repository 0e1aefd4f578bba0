"""The daemon process: the OS shell around DaemonCore.

Owns the listening sockets (a local stream socket for nodes, a TCP port for
peer daemons), the child processes, the timer/heartbeat threads, and the
coordinator connection. Every connection gets a reader thread; outbound node
events go through per-node queues drained by sender threads so a slow
receiver can never stall routing. All state mutations funnel through the
core's lock.
"""

from __future__ import annotations

import json
import os
import shlex
import socket
import subprocess
import tempfile
import threading
import time
import uuid as uuid_mod
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .. import dfspec, errors, proto
from ..shm import Pool, PoolConfig
from ..shm.os_backend import shm_dir
from .core import DaemonCore, DEFAULT_INLINE_THRESHOLD

ENV_ENDPOINT = "MINIFLOW_NODE_ENDPOINT"
ENV_DATAFLOW = "MINIFLOW_DATAFLOW_ID"
ENV_NODE = "MINIFLOW_NODE_ID"
ENV_OUTPUTS = "MINIFLOW_NODE_OUTPUTS"
ENV_THRESHOLD = "MINIFLOW_INLINE_THRESHOLD"


@dataclass
class DaemonConfig:
    machine_id: str = "local"
    coordinator_addr: str | None = None
    bind_host: str = "127.0.0.1"
    advertise_host: str = "127.0.0.1"
    inter_daemon_port: int = 0
    run_dir: str | None = None
    max_free_bytes: int = 256 * 1024 * 1024
    inline_threshold: int = DEFAULT_INLINE_THRESHOLD
    readiness_timeout: float = 30.0
    stop_grace: float = 5.0
    node_transport: str = "unix"  # "unix" | "tcp"
    event_queue_bound: int | None = None  # None = unbounded (lossless)
    exit_with_coordinator: bool = False
    heartbeat_interval: float = 2.0


class _NodeChannel:
    """Per-node outbound message queue drained by a dedicated sender thread."""

    def __init__(self, node_key: str, stream: proto.SocketStream, bound: int | None):
        self.stream = stream
        self.bound = bound
        self.dropped = 0
        self._queue = deque()
        self._cond = threading.Condition()
        self._closed = False
        self._thread = threading.Thread(target=self._run, name=f"mf-send-{node_key}", daemon=True)
        self._thread.start()

    def send_event(self, msg):
        with self._cond:
            if self._closed:
                return
            self._queue.append(msg)
            if self.bound is not None and len(self._queue) > self.bound:
                self._queue.popleft()
                self.dropped += 1
            self._cond.notify()

    send_message = send_event

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify()

    def _run(self):
        while True:
            with self._cond:
                while not self._queue and not self._closed:
                    self._cond.wait()
                if self._closed and not self._queue:
                    return
                msg = self._queue.popleft()
            try:
                self.stream.write_message(msg)
            except errors.ProtocolError:
                with self._cond:
                    self._closed = True
                return


class _PeerLink:
    """Lazy outbound connection to another daemon's data port."""

    def __init__(self, machine: str, addr: str, report):
        self.machine = machine
        self.addr = addr
        self._report = report
        self._queue = deque()
        self._cond = threading.Condition()
        self._closed = False
        self._dead = False
        self._thread = threading.Thread(target=self._run, name=f"mf-peer-{machine}", daemon=True)
        self._thread.start()

    def enqueue(self, msg: proto.RemoteOutput):
        with self._cond:
            if self._dead:
                raise errors.PeerUnreachable(f"daemon for {self.machine} at {self.addr} is unreachable")
            self._queue.append(msg)
            self._cond.notify()

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify()

    def _connect(self) -> proto.SocketStream:
        host, port = self.addr.rsplit(":", 1)
        last = None
        for _ in range(3):
            try:
                return proto.SocketStream(socket.create_connection((host, int(port)), timeout=5.0))
            except OSError as exc:
                last = exc
                time.sleep(0.2)
        raise errors.PeerUnreachable(f"cannot reach daemon at {self.addr}: {last}")

    def _run(self):
        stream = None
        while True:
            with self._cond:
                while not self._queue and not self._closed:
                    self._cond.wait()
                if self._closed:
                    if stream:
                        stream.close()
                    return
                msg = self._queue.popleft()
            try:
                if stream is None:
                    stream = self._connect()
                stream.write_message(msg)
            except (errors.ProtocolError, errors.PeerUnreachable) as exc:
                with self._cond:
                    self._dead = True
                    self._queue.clear()
                self._report(msg.dataflow_uuid, msg.node_id, str(exc))
                if stream:
                    stream.close()
                return


class Daemon:
    """Local manager: spawns nodes, routes messages, owns the shm pool."""

    def __init__(self, config: DaemonConfig | None = None):
        self.config = config or DaemonConfig()
        self._started = False
        self._shutdown = threading.Event()
        self.run_dir = Path(
            self.config.run_dir
            or os.path.join(tempfile.gettempdir(), f"miniflow-{self.config.machine_id}-{os.getpid()}")
        )
        self.run_dir.mkdir(parents=True, exist_ok=True)
        daemon_id = f"{_sanitize(self.config.machine_id)}.{os.getpid()}"
        self.pool = Pool(
            PoolConfig(max_free_bytes=self.config.max_free_bytes, name_prefix=f"miniflow-{daemon_id}")
        )
        self._audit_path = self.run_dir / f"audit-{_sanitize(self.config.machine_id)}.jsonl"
        self._audit_lock = threading.Lock()
        self.core = DaemonCore(
            self.config.machine_id,
            self.pool,
            inline_threshold=self.config.inline_threshold,
            send_remote=self._send_remote,
            report_status=self._report_status,
            dataflow_finished=self._on_dataflow_finished,
            audit=self._audit,
        )
        self._coordinator: proto.SocketStream | None = None
        self._node_server: socket.socket | None = None
        self._data_server: socket.socket | None = None
        self.node_endpoint = ""
        self.data_port = 0
        self._sock_dir: str | None = None
        self._peers: dict[str, _PeerLink] = {}
        self._peers_lock = threading.Lock()
        self._procs: dict[str, dict[str, subprocess.Popen]] = {}
        self._spawn_meta: dict[str, dict] = {}
        self._finished_events: dict[str, threading.Event] = {}
        self._failed: dict[str, bool] = {}
        self._timer_wake = threading.Event()
        self._threads: list[threading.Thread] = []

    # -- lifecycle -------------------------------------------------------------

    def start(self):
        if self._started:
            raise RuntimeError("daemon already started")
        self._started = True
        self._open_node_server()
        self._open_data_server()
        self._spawn_thread(self._accept_loop, self._node_server, name="mf-node-accept")
        self._spawn_thread(self._accept_loop, self._data_server, name="mf-data-accept")
        self._spawn_thread(self._timer_loop, name="mf-timers")
        if self.config.coordinator_addr:
            self._connect_coordinator()
            self._spawn_thread(self._coordinator_loop, name="mf-coord")
            self._spawn_thread(self._heartbeat_loop, name="mf-heartbeat")
        self._audit({"ev": "daemon_started", "machine": self.config.machine_id, "data_port": self.data_port})
        return self

    def shutdown(self):
        if self._shutdown.is_set():
            return
        self._shutdown.set()
        for uuid in self.core.running_dataflows():
            try:
                self.stop_dataflow(uuid, wait=True, timeout=self.config.stop_grace + 5)
            except errors.MiniflowError:
                pass
        for srv in (self._node_server, self._data_server):
            if srv is not None:
                try:
                    srv.close()
                except OSError:
                    pass
        if self._coordinator is not None:
            self._coordinator.close()
        with self._peers_lock:
            for link in self._peers.values():
                link.close()
        self._timer_wake.set()
        self.pool.close()
        if self._sock_dir and os.path.isdir(self._sock_dir):
            for p in Path(self._sock_dir).iterdir():
                p.unlink(missing_ok=True)
            os.rmdir(self._sock_dir)

    def wait_shutdown(self):
        self._shutdown.wait()

    # -- servers -----------------------------------------------------------------

    def _open_node_server(self):
        if self.config.node_transport == "unix" and hasattr(socket, "AF_UNIX"):
            self._sock_dir = tempfile.mkdtemp(prefix="mfs-")
            path = os.path.join(self._sock_dir, "node.sock")
            srv = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            srv.bind(path)
            self.node_endpoint = f"unix:{path}"
        else:
            srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            srv.bind((self.config.bind_host, 0))
            self.node_endpoint = f"tcp:{self.config.bind_host}:{srv.getsockname()[1]}"
        srv.listen(128)
        self._node_server = srv

    def _open_data_server(self):
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((self.config.bind_host, self.config.inter_daemon_port))
        srv.listen(64)
        self.data_port = srv.getsockname()[1]
        self._data_server = srv

    def _accept_loop(self, server: socket.socket):
        while not self._shutdown.is_set():
            try:
                conn, _ = server.accept()
            except OSError:
                return
            stream = proto.SocketStream(conn)
            self._spawn_thread(self._connection_loop, stream, name="mf-conn")

    def _connection_loop(self, stream: proto.SocketStream):
        """Shared handler: the first frame tells us who is talking."""
        channel: _NodeChannel | None = None
        ids = None
        try:
            while True:
                msg = stream.read_message(None)
                if isinstance(msg, proto.RegisterReclaim):
                    self._reclaim_loop(stream, msg.node_id)
                    return
                if isinstance(msg, proto.RegisterNode):
                    ids = (msg.dataflow_uuid, msg.node_id)
                    channel = _NodeChannel(msg.node_id, stream, self.config.event_queue_bound)
                    self.core.node_registered(msg.dataflow_uuid, msg.node_id, channel)
                elif isinstance(msg, proto.NodeReady) and ids:
                    if self.core.node_ready(*ids):
                        self._on_all_local_ready(ids[0])
                elif isinstance(msg, proto.SendOutput) and ids:
                    self._handle_send_output(ids[0], ids[1], msg, channel)
                elif isinstance(msg, proto.DataDropped) and ids:
                    self.core.handle_data_dropped(ids[1], msg.os_name, msg.generation)
                elif isinstance(msg, proto.RemoteOutput):
                    self.core.handle_remote_output(msg)
                else:
                    self._audit({"ev": "unexpected_message", "msg": type(msg).__name__})
        except errors.ProtocolError:
            pass
        except errors.MiniflowError as exc:
            self._audit({"ev": "connection_error", "error": str(exc), "ids": ids})
        finally:
            if channel is not None:
                channel.close()
            stream.close()

    def _reclaim_loop(self, stream: proto.SocketStream, node_id: str):
        """Drain reference drops without ever sleeping inside recv.

        The dropping node's send then never has to wake this thread, which
        keeps release() nearly free for receivers; reclamation tolerates the
        polling interval because blocks are only reused after release anyway.
        """
        try:
            while not self._shutdown.is_set():
                for msg in stream.drain_messages():
                    if isinstance(msg, proto.DataDropped):
                        self.core.handle_data_dropped(node_id, msg.os_name, msg.generation)
                time.sleep(0.004)
        except errors.ProtocolError:
            pass
        finally:
            stream.close()

    def _handle_send_output(self, uuid: str, node_id: str, msg: proto.SendOutput, channel):
        if isinstance(msg.data, proto.SizeRequest):
            grant = self.core.grant_block(uuid, node_id, msg.output_id, msg.data.total_size)
            channel.send_message(grant)
            return
        try:
            self.core.route_output(uuid, node_id, msg.output_id, msg.data)
        except errors.UnknownRoute as exc:
            self._audit({"ev": "unknown_route", "uuid": uuid, "node": node_id, "error": str(exc)})

    # -- coordinator link ----------------------------------------------------------

    def _connect_coordinator(self):
        host, port = self.config.coordinator_addr.rsplit(":", 1)
        last = None
        for _ in range(30):
            try:
                sock = socket.create_connection((host, int(port)), timeout=5.0)
                break
            except OSError as exc:
                last = exc
                time.sleep(0.2)
        else:
            raise errors.DaemonError(f"cannot reach coordinator at {self.config.coordinator_addr}: {last}")
        self._coordinator = proto.SocketStream(sock)
        self._coordinator.write_message(
            proto.RegisterDaemon(self.config.machine_id, f"{self.config.advertise_host}:{self.data_port}")
        )

    def _coordinator_loop(self):
        try:
            while True:
                msg = self._coordinator.read_message(None)
                if isinstance(msg, proto.SpawnDataflow):
                    self._spawn_thread(self._spawn_from_coordinator, msg, name="mf-spawn")
                elif isinstance(msg, proto.AllNodesReady):
                    self.core.barrier(msg.dataflow_uuid)
                    self._timer_wake.set()
                elif isinstance(msg, proto.StopDataflow):
                    self._spawn_thread(self._stop_from_coordinator, msg.dataflow_uuid, name="mf-stop")
                elif isinstance(msg, proto.LogsRequest):
                    self._coordinator.write_message(self._read_logs(msg))
        except errors.ProtocolError:
            pass
        finally:
            self._audit({"ev": "coordinator_connection_lost"})
            if self.config.exit_with_coordinator and not self._shutdown.is_set():
                self.shutdown()

    def _spawn_from_coordinator(self, msg: proto.SpawnDataflow):
        try:
            sub, peers = parse_spawn_payload(msg.subdataflow)
            self.spawn_dataflow(msg.dataflow_uuid, sub, peers)
        except errors.MiniflowError as exc:
            self._send_coordinator(proto.SpawnResult(msg.dataflow_uuid, False, str(exc)))
        except Exception as exc:  # defensive: malformed payloads must not kill the loop
            self._send_coordinator(proto.SpawnResult(msg.dataflow_uuid, False, f"internal error: {exc}"))

    def _stop_from_coordinator(self, uuid: str):
        try:
            self.stop_dataflow(uuid, wait=False)
        except errors.UnknownDataflow:
            pass

    def _send_coordinator(self, msg):
        if self._coordinator is None:
            return
        try:
            self._coordinator.write_message(msg)
        except errors.ProtocolError:
            pass

    def _heartbeat_loop(self):
        while not self._shutdown.wait(self.config.heartbeat_interval):
            self._send_coordinator(proto.Heartbeat(self.config.machine_id))

    def _read_logs(self, msg: proto.LogsRequest) -> proto.LogsReply:
        path = self.run_dir / msg.dataflow_uuid / f"{msg.node_id}.log"
        if not path.exists():
            return proto.LogsReply(False, f"no log for node {msg.node_id!r} of {msg.dataflow_uuid}".encode())
        return proto.LogsReply(True, path.read_bytes())

    # -- node process management ------------------------------------------------------

    def spawn_dataflow(self, uuid: str, sub: dfspec.SubDataflow, peers: dict[str, str] | None = None,
                       workdir: str | None = None):
        """Spawn every node of the sub-dataflow and arm the readiness timeout."""
        self.core.add_dataflow(uuid, sub, peers)
        log_dir = self.run_dir / uuid
        log_dir.mkdir(parents=True, exist_ok=True)
        self._finished_events[uuid] = threading.Event()
        self._failed[uuid] = False
        procs: dict[str, subprocess.Popen] = {}
        self._procs[uuid] = procs
        meta = {"watchdog": None, "result_sent": False, "stop_watchdog": None}
        self._spawn_meta[uuid] = meta
        try:
            for node in dfspec.spawn_order(sub.nodes):
                env = dict(os.environ)
                env.update(node.env)
                env[ENV_ENDPOINT] = self.node_endpoint
                env[ENV_DATAFLOW] = uuid
                env[ENV_NODE] = node.id
                env[ENV_OUTPUTS] = ",".join(node.outputs)
                env[ENV_THRESHOLD] = str(self.config.inline_threshold)
                env.setdefault("MINIFLOW_SHM_DIR", shm_dir())
                env.setdefault("PYTHONUNBUFFERED", "1")
                log_path = log_dir / f"{node.id}.log"
                log_file = open(log_path, "ab")
                try:
                    proc = subprocess.Popen(
                        shlex.split(node.command),
                        env=env,
                        stdout=log_file,
                        stderr=subprocess.STDOUT,
                        cwd=workdir,
                    )
                except OSError as exc:
                    raise errors.SpawnFailed(node.id, str(exc)) from None
                finally:
                    log_file.close()
                procs[node.id] = proc
                self._report_status(uuid, node.id, proto.NodeState.SPAWNED, f"pid={proc.pid}")
                self._spawn_thread(self._wait_node, uuid, node.id, proc, name=f"mf-wait-{node.id}")
        except errors.SpawnFailed as exc:
            self._kill_children(uuid)
            self.core.remove_dataflow(uuid)
            self._procs.pop(uuid, None)
            self._send_coordinator(proto.SpawnResult(uuid, False, str(exc)))
            raise
        watchdog = threading.Timer(self.config.readiness_timeout, self._readiness_expired, (uuid,))
        watchdog.daemon = True
        watchdog.start()
        meta["watchdog"] = watchdog

    def _wait_node(self, uuid: str, node_id: str, proc: subprocess.Popen):
        rc = proc.wait()
        self.core.node_exited(uuid, node_id, rc)
        if rc != 0:
            self._failed[uuid] = True

    def _readiness_expired(self, uuid: str):
        if uuid not in self.core.running_dataflows() or self.core.all_ready(uuid):
            return
        self._audit({"ev": "readiness_timeout", "uuid": uuid})
        self._send_coordinator(proto.SpawnResult(uuid, False, "readiness timeout"))
        self._failed[uuid] = True
        self._kill_children(uuid)

    def _on_all_local_ready(self, uuid: str):
        meta = self._spawn_meta.get(uuid)
        if meta is None or meta["result_sent"]:
            return
        meta["result_sent"] = True
        if meta["watchdog"] is not None:
            meta["watchdog"].cancel()
        self._audit({"ev": "all_local_ready", "uuid": uuid})
        if self.config.coordinator_addr:
            self._send_coordinator(proto.SpawnResult(uuid, True))
        else:
            # local mode: this daemon is the whole system, barrier immediately
            self.core.barrier(uuid)
            self._timer_wake.set()

    def stop_dataflow(self, uuid: str, wait: bool = True, timeout: float | None = None):
        remaining = self.core.stop_dataflow(uuid)
        if remaining:
            watchdog = threading.Timer(self.config.stop_grace, self._kill_children, (uuid,))
            watchdog.daemon = True
            watchdog.start()
            meta = self._spawn_meta.get(uuid)
            if meta is not None:
                meta["stop_watchdog"] = watchdog
        if wait:
            event = self._finished_events.get(uuid)
            if event is not None and not event.wait(timeout if timeout is not None else self.config.stop_grace + 10):
                raise errors.DaemonError(f"dataflow {uuid} did not stop in time")

    def _kill_children(self, uuid: str):
        for node_id, proc in list(self._procs.get(uuid, {}).items()):
            if proc.poll() is None:
                self._audit({"ev": "kill", "uuid": uuid, "node": node_id})
                proc.kill()

    def _on_dataflow_finished(self, uuid: str):
        meta = self._spawn_meta.get(uuid)
        if meta is not None:
            if meta["watchdog"] is not None:
                meta["watchdog"].cancel()
            if meta["stop_watchdog"] is not None:
                meta["stop_watchdog"].cancel()
        stats = self.pool.stats()
        self._audit(
            {
                "ev": "stopped",
                "uuid": uuid,
                "in_use_blocks": stats.in_use_blocks,
                "children": sum(1 for p in self._procs.get(uuid, {}).values() if p.poll() is None),
            }
        )
        self._send_coordinator(proto.DataflowFinished(uuid))
        event = self._finished_events.get(uuid)
        if event is not None:
            event.set()

    # -- local mode (no coordinator) -----------------------------------------------------

    def run_dataflow(self, spec: dfspec.DataflowSpec, workdir: str | None = None) -> str:
        """Spawn a machine-less dataflow on this daemon alone; returns its uuid."""
        subs = dfspec.partition(spec, self.config.machine_id)
        if set(subs) != {self.config.machine_id}:
            raise errors.MachinesRequireCoordinator(
                f"dataflow places nodes on {sorted(set(subs) - {self.config.machine_id})}; run it via a coordinator"
            )
        uuid = str(uuid_mod.uuid4())
        self.spawn_dataflow(uuid, subs[self.config.machine_id], {}, workdir=workdir)
        return uuid

    def wait_dataflow(self, uuid: str, timeout: float | None = None) -> bool:
        """True if every node exited cleanly; False on any failure."""
        event = self._finished_events.get(uuid)
        if event is None:
            raise errors.UnknownDataflow(f"no dataflow {uuid}")
        if not event.wait(timeout):
            raise errors.DaemonError(f"dataflow {uuid} still running after {timeout}s")
        return not self._failed.get(uuid, False)

    def node_pids(self, uuid: str) -> dict[str, int]:
        return {node_id: proc.pid for node_id, proc in self._procs.get(uuid, {}).items()}

    # -- plumbing ---------------------------------------------------------------------

    def _send_remote(self, machine: str, addr: str | None, msg: proto.RemoteOutput):
        if addr is None:
            raise errors.PeerUnreachable(f"no address known for machine {machine!r}")
        with self._peers_lock:
            link = self._peers.get(machine)
            if link is None or link.addr != addr:
                link = _PeerLink(machine, addr, self._peer_failed)
                self._peers[machine] = link
        link.enqueue(msg)

    def _peer_failed(self, uuid: str, node_id: str, detail: str):
        self._audit({"ev": "peer_unreachable", "uuid": uuid, "node": node_id, "detail": detail})
        self._report_status(uuid, node_id, proto.NodeState.RUNNING, detail)

    def _report_status(self, uuid: str, node_id: str, state: proto.NodeState, detail: str = ""):
        self._send_coordinator(proto.NodeStatus(uuid, node_id, state, detail))

    def _timer_loop(self):
        while not self._shutdown.is_set():
            deadline = self.core.next_timer_deadline_ns()
            if deadline is None:
                self._timer_wake.wait(0.2)
                self._timer_wake.clear()
                continue
            delay = (deadline - time.monotonic_ns()) / 1e9
            if delay > 0:
                self._timer_wake.wait(min(delay, 0.2))
                self._timer_wake.clear()
                continue
            self.core.fire_timers()

    def _audit(self, record: dict):
        record = {"ts_ns": time.monotonic_ns(), **record}
        with self._audit_lock:
            with open(self._audit_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, separators=(",", ":")) + "\n")

    def _spawn_thread(self, fn, *args, name="mf-thread"):
        t = threading.Thread(target=fn, args=args, name=name, daemon=True)
        t.start()
        self._threads.append(t)
        return t


def _sanitize(text: str) -> str:
    return "".join(c if (c.isalnum() or c in "_.") else "_" for c in text)


def spawn_payload(sub: dfspec.SubDataflow, peers: dict[str, str]) -> bytes:
    """SpawnDataflow blob: the sub-dataflow plus peer daemon data addresses."""
    return json.dumps(
        {"sub": json.loads(dfspec.subdataflow_to_json(sub)), "peers": peers},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()


def parse_spawn_payload(blob: bytes) -> tuple[dfspec.SubDataflow, dict[str, str]]:
    doc = json.loads(blob)
    sub = dfspec.subdataflow_from_json(json.dumps(doc["sub"], sort_keys=True).encode())
    return sub, dict(doc.get("peers") or {})
