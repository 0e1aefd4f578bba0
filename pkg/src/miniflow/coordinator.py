"""Global control stack.

One coordinator serves any number of daemons (one per machine) and CLI
clients on a single TCP port; the first frame on a connection tells the
coordinator which kind of peer it is. Dataflow lifecycle:

    spawning -> ready -> running -> (stopping ->) finished | failed

The ready->running edge is the AllNodesReady barrier: it is broadcast at
most once per dataflow, and only after every daemon acknowledged its spawn
and every node of every sub-dataflow reported ready. Every phase transition
is appended to a line-delimited audit log, which is what the barrier-safety
tests inspect.
"""

from __future__ import annotations

import json
import os
import socket
import tempfile
import threading
import time
import uuid as uuid_mod
from dataclasses import dataclass, field

from . import dfspec, errors, proto
from .daemon.service import spawn_payload

DEFAULT_PORT = 53290


@dataclass
class CoordinatorConfig:
    port: int = DEFAULT_PORT
    bind_host: str = "127.0.0.1"
    default_machine: str = "local"
    keep_running: bool = False  # keep a dataflow alive when one node fails
    readiness_timeout: float = 30.0
    stop_timeout: float = 15.0
    heartbeat_timeout: float = 10.0
    state_dir: str | None = None


@dataclass
class _DaemonLink:
    machine_id: str
    stream: proto.SocketStream
    data_addr: str
    last_seen: float
    logs_lock: threading.Lock = field(default_factory=threading.Lock)
    logs_reply: proto.LogsReply | None = None
    logs_event: threading.Event = field(default_factory=threading.Event)


@dataclass
class _DataflowRecord:
    uuid: str
    name: str
    spec: dfspec.DataflowSpec
    subs: dict[str, dfspec.SubDataflow]
    phase: str = "spawning"
    started_at: float = field(default_factory=time.time)
    spawn_ok: dict[str, bool | None] = field(default_factory=dict)      # machine -> result
    node_states: dict[str, proto.NodeState] = field(default_factory=dict)
    finished_daemons: set[str] = field(default_factory=set)
    barrier_sent: bool = False
    failure: str = ""

    @property
    def machines(self) -> list[str]:
        return sorted(self.subs)

    def all_nodes(self) -> list[str]:
        return [n.id for sub in self.subs.values() for n in sub.nodes]


class Coordinator:
    def __init__(self, config: CoordinatorConfig | None = None):
        self.config = config or CoordinatorConfig()
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._daemons: dict[str, _DaemonLink] = {}
        self._dataflows: dict[str, _DataflowRecord] = {}
        self._server: socket.socket | None = None
        self._shutdown = threading.Event()
        self.port = 0
        state_dir = self.config.state_dir or tempfile.gettempdir()
        os.makedirs(state_dir, exist_ok=True)
        self._audit_path = os.path.join(state_dir, "coordinator-audit.jsonl")
        self._audit_lock = threading.Lock()

    # -- lifecycle ---------------------------------------------------------------

    def start(self):
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((self.config.bind_host, self.config.port))
        srv.listen(64)
        self.port = srv.getsockname()[1]
        self._server = srv
        threading.Thread(target=self._accept_loop, name="mfc-accept", daemon=True).start()
        threading.Thread(target=self._sweep_loop, name="mfc-sweep", daemon=True).start()
        self._audit({"ev": "coordinator_started", "port": self.port})
        return self

    def shutdown(self):
        if self._shutdown.is_set():
            return
        self._shutdown.set()
        with self._lock:
            links = list(self._daemons.values())
            self._daemons.clear()
        for link in links:
            link.stream.close()
        if self._server is not None:
            try:
                self._server.close()
            except OSError:
                pass

    def wait_shutdown(self):
        self._shutdown.wait()

    # -- connection handling ---------------------------------------------------------

    def _accept_loop(self):
        while not self._shutdown.is_set():
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            threading.Thread(
                target=self._connection_loop, args=(proto.SocketStream(conn),), name="mfc-conn", daemon=True
            ).start()

    def _connection_loop(self, stream: proto.SocketStream):
        link = None
        try:
            while True:
                msg = stream.read_message(None)
                if isinstance(msg, proto.RegisterDaemon):
                    link = self._register_daemon(msg, stream)
                elif isinstance(msg, proto.CliRequest):
                    reply = self._handle_cli(msg)
                    stream.write_message(reply)
                    if msg.verb == proto.CliVerb.DESTROY and reply.ok:
                        threading.Thread(target=self.shutdown, daemon=True).start()
                        return
                elif link is not None:
                    link.last_seen = time.monotonic()
                    self._handle_daemon_message(link, msg)
                else:
                    self._audit({"ev": "unexpected_message", "msg": type(msg).__name__})
        except errors.ProtocolError:
            pass
        finally:
            stream.close()
            if link is not None:
                self._daemon_lost(link, "connection closed")

    def _register_daemon(self, msg: proto.RegisterDaemon, stream) -> _DaemonLink:
        link = _DaemonLink(msg.machine_id, stream, msg.data_addr, time.monotonic())
        with self._lock:
            old = self._daemons.get(msg.machine_id)
            self._daemons[msg.machine_id] = link
        if old is not None:
            old.stream.close()
        self._audit({"ev": "daemon_registered", "machine": msg.machine_id, "data_addr": msg.data_addr})
        return link

    def _daemon_lost(self, link: _DaemonLink, reason: str):
        with self._lock:
            if self._daemons.get(link.machine_id) is not link:
                return
            del self._daemons[link.machine_id]
            self._audit({"ev": "daemon_lost", "machine": link.machine_id, "reason": reason})
            for record in self._dataflows.values():
                if link.machine_id in record.subs and record.phase not in ("finished", "failed"):
                    self._transition(record, "failed", f"daemon {link.machine_id} unreachable: {reason}")
            self._cond.notify_all()

    # -- daemon messages ---------------------------------------------------------------

    def _handle_daemon_message(self, link: _DaemonLink, msg):
        if isinstance(msg, proto.Heartbeat):
            return
        if isinstance(msg, proto.LogsReply):
            link.logs_reply = msg
            link.logs_event.set()
            return
        with self._lock:
            if isinstance(msg, proto.SpawnResult):
                record = self._dataflows.get(msg.dataflow_uuid)
                if record is None:
                    return
                record.spawn_ok[link.machine_id] = msg.ok
                if not msg.ok:
                    self._rollback(record, f"spawn failed on {link.machine_id}: {msg.error}")
                else:
                    self._maybe_barrier(record)
                self._cond.notify_all()
            elif isinstance(msg, proto.NodeStatus):
                self._collect_status(link, msg)
            elif isinstance(msg, proto.DataflowFinished):
                record = self._dataflows.get(msg.dataflow_uuid)
                if record is None:
                    return
                record.finished_daemons.add(link.machine_id)
                if set(record.machines) <= record.finished_daemons and record.phase not in ("finished", "failed"):
                    self._transition(record, "failed" if record.failure else "finished", record.failure)
                self._cond.notify_all()

    def _collect_status(self, link: _DaemonLink, msg: proto.NodeStatus):
        record = self._dataflows.get(msg.dataflow_uuid)
        if record is None or record.phase in ("finished", "failed"):
            self._audit({"ev": "stale_status", "uuid": msg.dataflow_uuid, "node": msg.node_id})
            return
        record.node_states[msg.node_id] = msg.state
        self._audit(
            {
                "ev": "node_status",
                "uuid": msg.dataflow_uuid,
                "node": msg.node_id,
                "state": msg.state.name.lower(),
                "detail": msg.detail,
            }
        )
        if msg.state == proto.NodeState.READY:
            self._maybe_barrier(record)
        elif msg.state == proto.NodeState.FAILED and record.phase == "running":
            record.failure = record.failure or f"node {msg.node_id} failed: {msg.detail}"
            if not self.config.keep_running:
                self._stop_record(record)
        self._cond.notify_all()

    def _maybe_barrier(self, record: _DataflowRecord):
        if record.barrier_sent or record.phase != "spawning":
            return
        if any(record.spawn_ok.get(m) is not True for m in record.machines):
            return
        nodes = record.all_nodes()
        ready = [n for n in nodes if record.node_states.get(n) in (proto.NodeState.READY, proto.NodeState.RUNNING)]
        if len(ready) != len(nodes):
            return
        self._transition(record, "ready")
        record.barrier_sent = True
        for machine in record.machines:
            link = self._daemons.get(machine)
            if link is not None:
                try:
                    link.stream.write_message(proto.AllNodesReady(record.uuid))
                except errors.ProtocolError:
                    pass
        self._audit({"ev": "all_nodes_ready_broadcast", "uuid": record.uuid, "machines": record.machines})
        self._transition(record, "running")

    # -- dataflow operations ---------------------------------------------------------------

    def start_dataflow(self, spec_text: str, name: str | None = None) -> str:
        spec = dfspec.parse(spec_text)
        diagnostics = dfspec.validate(spec)
        if dfspec.has_errors(diagnostics):
            raise errors.ValidationFailed([d for d in diagnostics if d.severity == "error"])
        subs = dfspec.partition(spec, self.config.default_machine)
        uuid = str(uuid_mod.uuid4())
        with self._lock:
            missing = [m for m in subs if m not in self._daemons]
            if missing:
                raise errors.UnknownMachine(f"no daemon registered for machine(s) {missing}")
            if name:
                for record in self._dataflows.values():
                    if record.name == name and record.phase not in ("finished", "failed"):
                        raise errors.CoordinatorError(f"name {name!r} is already in use")
            record = _DataflowRecord(uuid, name or "", spec, subs)
            record.spawn_ok = {m: None for m in subs}
            self._dataflows[uuid] = record
            self._audit({"ev": "dataflow_started", "uuid": uuid, "name": record.name, "machines": record.machines})
            peers = {m: self._daemons[m].data_addr for m in subs}
            for machine, sub in subs.items():
                self._daemons[machine].stream.write_message(
                    proto.SpawnDataflow(uuid, spawn_payload(sub, peers))
                )
            deadline = time.monotonic() + self.config.readiness_timeout
            while record.phase in ("spawning", "ready"):
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    self._rollback(record, "readiness timeout")
                    raise errors.ReadinessTimeout(f"dataflow {uuid} was not ready within {self.config.readiness_timeout}s")
                self._cond.wait(remaining)
            if record.phase == "failed":
                raise errors.CoordinatorError(f"dataflow failed to start: {record.failure}")
            return uuid

    def stop_dataflow(self, uuid_or_name: str, timeout: float | None = None) -> None:
        with self._lock:
            record = self._resolve(uuid_or_name)
            if record.phase in ("finished", "failed"):
                raise errors.AlreadyStopped(f"dataflow {record.uuid} is already {record.phase}")
            self._stop_record(record)
            deadline = time.monotonic() + (timeout if timeout is not None else self.config.stop_timeout)
            while record.phase == "stopping":
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    self._transition(record, "failed", "stop timed out: not all daemons confirmed")
                    raise errors.CoordinatorError(f"stop of {record.uuid} timed out")
                self._cond.wait(remaining)

    def _stop_record(self, record: _DataflowRecord):
        if record.phase in ("stopping", "finished", "failed"):
            return
        self._transition(record, "stopping", record.failure)
        for machine in record.machines:
            link = self._daemons.get(machine)
            if link is not None:
                try:
                    link.stream.write_message(proto.StopDataflow(record.uuid))
                except errors.ProtocolError:
                    pass

    def _rollback(self, record: _DataflowRecord, reason: str):
        """A spawn leg failed: stop every daemon that received the dataflow."""
        record.failure = reason
        for machine in record.machines:
            link = self._daemons.get(machine)
            if link is not None:
                try:
                    link.stream.write_message(proto.StopDataflow(record.uuid))
                except errors.ProtocolError:
                    pass
        self._transition(record, "failed", reason)

    def list_dataflows(self) -> list[dict]:
        with self._lock:
            return [
                {
                    "uuid": r.uuid,
                    "name": r.name,
                    "phase": r.phase,
                    "machines": r.machines,
                    "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(r.started_at)),
                }
                for r in sorted(self._dataflows.values(), key=lambda r: r.started_at)
            ]

    def fetch_logs(self, uuid_or_name: str, node_id: str) -> str:
        with self._lock:
            record = self._resolve(uuid_or_name)
            machine = None
            for m, sub in record.subs.items():
                if any(n.id == node_id for n in sub.nodes):
                    machine = m
                    break
            if machine is None:
                raise errors.NotFound(f"no node {node_id!r} in dataflow {record.uuid}")
            link = self._daemons.get(machine)
            if link is None:
                raise errors.DaemonUnreachable(f"daemon for machine {machine!r} is not connected")
            uuid = record.uuid
        with link.logs_lock:
            link.logs_event.clear()
            link.logs_reply = None
            try:
                link.stream.write_message(proto.LogsRequest(uuid, node_id))
            except errors.ProtocolError as exc:
                raise errors.DaemonUnreachable(str(exc)) from None
            if not link.logs_event.wait(10.0):
                raise errors.DaemonUnreachable(f"daemon {machine!r} did not answer the logs request")
            reply = link.logs_reply
        if not reply.ok:
            raise errors.NotFound(reply.content.decode("utf-8", "replace"))
        return reply.content.decode("utf-8", "replace")

    def _resolve(self, uuid_or_name: str) -> _DataflowRecord:
        record = self._dataflows.get(uuid_or_name)
        if record is not None:
            return record
        matches = [r for r in self._dataflows.values() if r.name == uuid_or_name]
        active = [r for r in matches if r.phase not in ("finished", "failed")]
        pick = active or matches
        if not pick:
            raise errors.NotFound(f"no dataflow with uuid or name {uuid_or_name!r}")
        return pick[-1]

    # -- CLI ----------------------------------------------------------------------------

    def _handle_cli(self, msg: proto.CliRequest) -> proto.CliReply:
        try:
            if msg.verb == proto.CliVerb.START:
                spec_text = msg.args[0]
                name = msg.args[1] if len(msg.args) > 1 and msg.args[1] else None
                return proto.CliReply(True, (self.start_dataflow(spec_text, name),))
            if msg.verb == proto.CliVerb.STOP:
                self.stop_dataflow(msg.args[0])
                return proto.CliReply(True, ())
            if msg.verb == proto.CliVerb.LIST:
                rows = tuple(json.dumps(row, sort_keys=True) for row in self.list_dataflows())
                return proto.CliReply(True, rows)
            if msg.verb == proto.CliVerb.LOGS:
                return proto.CliReply(True, (self.fetch_logs(msg.args[0], msg.args[1]),))
            if msg.verb == proto.CliVerb.CHECK:
                with self._lock:
                    daemons = sorted(self._daemons)
                items = [json.dumps({"component": "coordinator", "running": True, "port": self.port})]
                items += [
                    json.dumps({"component": "daemon", "machine": m, "running": True}, sort_keys=True)
                    for m in daemons
                ]
                return proto.CliReply(True, tuple(items))
            if msg.verb == proto.CliVerb.DESTROY:
                with self._lock:
                    active = [r for r in self._dataflows.values() if r.phase in ("ready", "running", "spawning")]
                for record in active:
                    try:
                        self.stop_dataflow(record.uuid, timeout=5.0)
                    except errors.MiniflowError:
                        pass
                self._audit({"ev": "destroy"})
                return proto.CliReply(True, ())
        except errors.MiniflowError as exc:
            return proto.CliReply(False, (f"{type(exc).__name__}: {exc}",))
        return proto.CliReply(False, (f"unsupported verb {msg.verb}",))

    # -- internals ------------------------------------------------------------------------

    def _transition(self, record: _DataflowRecord, phase: str, detail: str = ""):
        record.phase = phase
        if detail:
            record.failure = detail
        self._audit({"ev": "phase", "uuid": record.uuid, "phase": phase, "detail": detail})

    def _sweep_loop(self):
        while not self._shutdown.wait(1.0):
            now = time.monotonic()
            with self._lock:
                stale = [
                    link
                    for link in self._daemons.values()
                    if now - link.last_seen > self.config.heartbeat_timeout
                ]
            for link in stale:
                link.stream.close()
                self._daemon_lost(link, f"no heartbeat for {self.config.heartbeat_timeout}s")

    def _audit(self, record: dict):
        line = json.dumps({"ts": time.time(), **record}, separators=(",", ":"))
        with self._audit_lock:
            with open(self._audit_path, "a", encoding="utf-8") as f:
                f.write(line + "\n")
