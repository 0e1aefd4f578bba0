"""Daemon logic: routing, readiness gating, timers, and block bookkeeping.

This is the daemon with the operating system removed. Node connections are
abstracted as channels (anything with send_event), remote daemons as a
send_remote hook, and time as an injected clock, so the full delivery
semantics — barrier gating, per-edge ordering, refcount-driven reclamation,
no-burst timers — are exercised by in-process tests without spawning a
single child. The socket/process layer in service.py stays a thin shell.

All mutating entry points serialize on one lock, which makes route/release
pairs linearizable; channel sends inside the lock only enqueue.
"""

from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field

from .. import errors, proto
from .._clock import hybrid_now_ns, mono_now_ns
from ..dfspec import OutputRef, SubDataflow, TimerInput
from ..envelope import ElementType, encode as encode_envelope
from ..shm.pool import Pool

DEFAULT_INLINE_THRESHOLD = 4096
NS_PER_MS = 1_000_000


@dataclass
class Route:
    local: list[tuple[str, str]] = field(default_factory=list)   # (receiver node, input id)
    remote: list[str] = field(default_factory=list)              # destination machines


@dataclass
class DeliverySummary:
    local_deliveries: int
    remote_deliveries: int
    transport: str  # "inline" | "shm"
    gated: bool = False


@dataclass
class _Timer:
    node_id: str
    input_id: str
    interval_ns: int
    base_ns: int = 0
    deadline_ns: int = 0


@dataclass
class _BlockRef:
    block_id: int
    os_name: str
    generation: int
    length: int
    granted_to: str            # producing node (or "" for remote ingress)
    pool_refs: int             # references the pool lease was acquired with
    confirmed: bool = False
    holders: Counter = field(default_factory=Counter)


@dataclass
class _NodeRuntime:
    spec_id: str
    declared_inputs: dict
    channel: object = None
    registered: bool = False
    ready: bool = False
    exited: bool = False
    exit_code: int | None = None
    stop_sent: bool = False
    has_remote_inputs: bool = False


@dataclass
class _DataflowRuntime:
    uuid: str
    sub: SubDataflow
    peers: dict[str, str]
    nodes: dict[str, _NodeRuntime]
    routing: dict[tuple[str, str], Route]
    ingress: dict[tuple[str, str], list[tuple[str, str]]]
    timers: list[_Timer]
    barrier_passed: bool = False
    stopping: bool = False
    finished: bool = False
    pending: list = field(default_factory=list)  # gated (node_id, output_id, location)
    blocks: dict[str, _BlockRef] = field(default_factory=dict)  # os_name -> ref


class DaemonCore:
    """Pure dataflow engine shared by the real daemon and the test harness."""

    def __init__(
        self,
        machine_id: str,
        pool: Pool,
        inline_threshold: int = DEFAULT_INLINE_THRESHOLD,
        clock=mono_now_ns,
        hybrid_clock=hybrid_now_ns,
        send_remote=None,
        report_status=None,
        dataflow_finished=None,
        audit=None,
    ):
        self.machine_id = machine_id
        self.pool = pool
        self.inline_threshold = inline_threshold
        self.clock = clock
        self.hybrid_clock = hybrid_clock
        self._send_remote = send_remote or (lambda machine, addr, msg: None)
        self._report_status = report_status or (lambda uuid, node, state, detail="": None)
        self._dataflow_finished = dataflow_finished or (lambda uuid: None)
        self._audit = audit or (lambda record: None)
        self._lock = threading.RLock()
        self._dataflows: dict[str, _DataflowRuntime] = {}
        self._blocks_by_name: dict[str, tuple[str, _BlockRef]] = {}
        self._generation = 0

    # -- dataflow setup ---------------------------------------------------------

    def add_dataflow(self, uuid: str, sub: SubDataflow, peers: dict[str, str] | None = None):
        with self._lock:
            if uuid in self._dataflows:
                raise errors.DuplicateDataflow(f"dataflow {uuid} already running")
            local_ids = {n.id for n in sub.nodes}
            routing: dict[tuple[str, str], Route] = {}
            timers: list[_Timer] = []
            for n in sub.nodes:
                for output_id in n.outputs:
                    routing.setdefault((n.id, output_id), Route())
                for input_id, src in n.inputs.items():
                    if isinstance(src, TimerInput):
                        timers.append(_Timer(n.id, input_id, src.interval_ms * NS_PER_MS))
                    elif isinstance(src, OutputRef) and src.node_id in local_ids:
                        routing.setdefault((src.node_id, src.output_id), Route()).local.append(
                            (n.id, input_id)
                        )
            for binding in sub.remote_outputs:
                routing.setdefault((binding.node_id, binding.output_id), Route()).remote = list(
                    binding.destinations
                )
            ingress: dict[tuple[str, str], list[tuple[str, str]]] = {}
            for binding in sub.remote_inputs:
                ingress.setdefault((binding.source.node_id, binding.source.output_id), []).append(
                    (binding.node_id, binding.input_id)
                )
            for route in routing.values():
                route.local.sort()
            runtime = _DataflowRuntime(
                uuid=uuid,
                sub=sub,
                peers=dict(peers or {}),
                nodes={n.id: _NodeRuntime(n.id, n.inputs) for n in sub.nodes},
                routing=routing,
                ingress=ingress,
                timers=timers,
            )
            for receivers in ingress.values():
                for node_id, _ in receivers:
                    runtime.nodes[node_id].has_remote_inputs = True
            self._dataflows[uuid] = runtime
            self._audit({"ev": "dataflow_added", "uuid": uuid, "nodes": sorted(runtime.nodes)})

    def remove_dataflow(self, uuid: str):
        with self._lock:
            self._dataflows.pop(uuid, None)

    # -- node lifecycle -----------------------------------------------------------

    def node_registered(self, uuid: str, node_id: str, channel) -> None:
        with self._lock:
            runtime = self._runtime(uuid)
            node = self._node(runtime, node_id)
            node.channel = channel
            node.registered = True

    def node_ready(self, uuid: str, node_id: str) -> bool:
        """Mark ready; True when every node of the sub-dataflow is ready."""
        with self._lock:
            runtime = self._runtime(uuid)
            node = self._node(runtime, node_id)
            if not node.registered:
                raise errors.UnknownDataflow(f"node {node_id} signalled ready before registering")
            node.ready = True
            self._report_status(uuid, node_id, proto.NodeState.READY)
            self._audit({"ev": "node_ready", "uuid": uuid, "node": node_id})
            return all(n.ready for n in runtime.nodes.values())

    def all_ready(self, uuid: str) -> bool:
        with self._lock:
            runtime = self._runtime(uuid)
            return all(n.ready for n in runtime.nodes.values())

    def barrier(self, uuid: str) -> None:
        """AllNodesReady received: open the gate, start timers, flush queue."""
        with self._lock:
            runtime = self._runtime(uuid)
            if runtime.barrier_passed:
                return
            runtime.barrier_passed = True
            now = self.clock()
            for timer in runtime.timers:
                timer.base_ns = now
                timer.deadline_ns = now + timer.interval_ns
            self._audit({"ev": "barrier", "uuid": uuid})
            for node_id in runtime.nodes:
                self._report_status(uuid, node_id, proto.NodeState.RUNNING)
            pending, runtime.pending = runtime.pending, []
            for kind, *args in pending:
                if kind == "output":
                    self._route_locked(runtime, *args)
                else:
                    self._ingress_locked(runtime, *args)

    # -- output path ----------------------------------------------------------------

    def grant_block(self, uuid: str, node_id: str, output_id: str, total_size: int) -> proto.BlockGrant:
        """First leg of a large send: lease a block sized for the envelope.

        The lease is taken with one reference per local receiver (the spec'd
        refcount); with zero local receivers the daemon holds a single
        routing reference that it drops after forwarding to remote peers.
        """
        with self._lock:
            runtime = self._runtime(uuid)
            route = runtime.routing.get((node_id, output_id))
            if route is None:
                return proto.BlockGrant(False, error=f"{node_id}/{output_id} is not a declared output")
            try:
                lease = self.pool.acquire(total_size, max(1, len(route.local)))
            except errors.PoolError as exc:
                return proto.BlockGrant(False, error=str(exc))
            self._generation += 1
            ref = _BlockRef(
                block_id=lease.block.id,
                os_name=lease.block.os_name,
                generation=self._generation,
                length=total_size,
                granted_to=node_id,
                pool_refs=max(1, len(route.local)),
            )
            runtime.blocks[ref.os_name] = ref
            self._blocks_by_name[ref.os_name] = (uuid, ref)
            return proto.BlockGrant(True, ref.os_name, 0, total_size, ref.generation)

    def route_output(self, uuid: str, node_id: str, output_id: str, location) -> DeliverySummary:
        with self._lock:
            runtime = self._runtime(uuid)
            if (node_id, output_id) not in runtime.routing:
                raise errors.UnknownRoute(f"{node_id}/{output_id} is not a declared output")
            if not runtime.barrier_passed:
                runtime.pending.append(("output", node_id, output_id, location))
                self._audit({"ev": "gated_output", "uuid": uuid, "node": node_id, "output": output_id})
                return DeliverySummary(0, 0, "shm" if isinstance(location, proto.ShmData) else "inline", gated=True)
            return self._route_locked(runtime, node_id, output_id, location)

    def _route_locked(self, runtime, node_id, output_id, location) -> DeliverySummary:
        route = runtime.routing[(node_id, output_id)]
        if isinstance(location, proto.ShmData):
            return self._route_shm(runtime, node_id, output_id, route, location)
        return self._route_inline(runtime, node_id, output_id, route, location.blob)

    def _route_inline(self, runtime, node_id, output_id, route, blob) -> DeliverySummary:
        for receiver_id, input_id in route.local:
            self._deliver(runtime, receiver_id, proto.Event(proto.EventKind.INPUT, input_id, proto.InlineData(blob)))
        remote = self._send_to_peers(runtime, node_id, output_id, route, blob)
        return DeliverySummary(len(route.local), remote, "inline")

    def _route_shm(self, runtime, node_id, output_id, route, loc: proto.ShmData) -> DeliverySummary:
        ref = runtime.blocks.get(loc.os_name)
        if ref is None or ref.generation != loc.generation or ref.granted_to != node_id or ref.confirmed:
            raise errors.UnknownRoute(
                f"node {node_id} confirmed {loc.os_name} gen {loc.generation}, which was not granted to it"
            )
        ref.confirmed = True
        ref.length = loc.length
        remote = 0
        if route.remote:
            body = bytes(self.pool.buffer_of(ref.block_id)[loc.offset : loc.offset + loc.length])
            remote = self._send_to_peers(runtime, node_id, output_id, route, body)
        if route.local:
            # the lease was acquired with one reference per local receiver
            for receiver_id, _ in route.local:
                ref.holders[receiver_id] += 1
            for receiver_id, input_id in route.local:
                self._deliver(
                    runtime,
                    receiver_id,
                    proto.Event(
                        proto.EventKind.INPUT,
                        input_id,
                        proto.ShmData(loc.os_name, loc.offset, loc.length, loc.generation),
                    ),
                )
        else:
            self._drop_block_refs(runtime, ref, ref.pool_refs)
        return DeliverySummary(len(route.local), remote, "shm")

    def _send_to_peers(self, runtime, node_id, output_id, route, envelope_bytes) -> int:
        sent = 0
        for machine in route.remote:
            addr = runtime.peers.get(machine)
            msg = proto.RemoteOutput(runtime.uuid, node_id, output_id, envelope_bytes)
            try:
                self._send_remote(machine, addr, msg)
                sent += 1
            except errors.PeerUnreachable as exc:
                self._report_status(
                    runtime.uuid, node_id, proto.NodeState.RUNNING, f"peer {machine} unreachable: {exc}"
                )
        return sent

    def _deliver(self, runtime, receiver_id: str, event: proto.Event):
        node = runtime.nodes[receiver_id]
        self._audit(
            {
                "ev": "deliver",
                "uuid": runtime.uuid,
                "node": receiver_id,
                "input": event.input_id,
                "barrier_passed": runtime.barrier_passed,
            }
        )
        if node.channel is not None and not node.exited:
            node.channel.send_event(event)

    # -- remote ingress ----------------------------------------------------------------

    def handle_remote_output(self, msg: proto.RemoteOutput):
        with self._lock:
            runtime = self._dataflows.get(msg.dataflow_uuid)
            if runtime is None:
                return  # dataflow already gone; drop silently
            if not runtime.barrier_passed:
                runtime.pending.append(("ingress", msg.node_id, msg.output_id, msg.envelope))
                return
            self._ingress_locked(runtime, msg.node_id, msg.output_id, msg.envelope)

    def _ingress_locked(self, runtime, source_node, output_id, envelope_bytes):
        receivers = runtime.ingress.get((source_node, output_id), ())
        if not receivers:
            return
        if len(envelope_bytes) > self.inline_threshold:
            try:
                lease = self.pool.acquire(len(envelope_bytes), len(receivers))
            except errors.PoolError:
                lease = None
            if lease is not None:
                lease.buf[: len(envelope_bytes)] = envelope_bytes
                self._generation += 1
                ref = _BlockRef(
                    block_id=lease.block.id,
                    os_name=lease.block.os_name,
                    generation=self._generation,
                    length=len(envelope_bytes),
                    granted_to="",
                    pool_refs=len(receivers),
                    confirmed=True,
                )
                for receiver_id, _ in receivers:
                    ref.holders[receiver_id] += 1
                runtime.blocks[ref.os_name] = ref
                self._blocks_by_name[ref.os_name] = (runtime.uuid, ref)
                for receiver_id, input_id in receivers:
                    self._deliver(
                        runtime,
                        receiver_id,
                        proto.Event(
                            proto.EventKind.INPUT,
                            input_id,
                            proto.ShmData(ref.os_name, 0, ref.length, ref.generation),
                        ),
                    )
                return
        for receiver_id, input_id in receivers:
            self._deliver(
                runtime,
                receiver_id,
                proto.Event(proto.EventKind.INPUT, input_id, proto.InlineData(envelope_bytes)),
            )

    # -- reclamation --------------------------------------------------------------------

    def handle_data_dropped(self, node_id: str, os_name: str, generation: int):
        with self._lock:
            entry = self._blocks_by_name.get(os_name)
            if entry is None:
                self._audit({"ev": "stale_drop", "os_name": os_name, "node": node_id})
                return
            uuid, ref = entry
            if ref.generation != generation or ref.holders.get(node_id, 0) <= 0:
                self._audit({"ev": "stale_drop", "os_name": os_name, "node": node_id})
                return
            ref.holders[node_id] -= 1
            if ref.holders[node_id] == 0:
                del ref.holders[node_id]
            runtime = self._dataflows.get(uuid)
            self._drop_block_refs(runtime, ref, 1)

    def _drop_block_refs(self, runtime, ref: _BlockRef, count: int):
        for _ in range(count):
            ref.pool_refs -= 1
            self.pool.release(ref.block_id)
        if ref.pool_refs <= 0:
            self._blocks_by_name.pop(ref.os_name, None)
            if runtime is not None:
                runtime.blocks.pop(ref.os_name, None)

    # -- timers ------------------------------------------------------------------------

    def fire_timers(self, now_ns: int | None = None) -> int:
        """Deliver a tick per due timer; skipped intervals never burst."""
        now = self.clock() if now_ns is None else now_ns
        fired = 0
        with self._lock:
            for runtime in self._dataflows.values():
                if not runtime.barrier_passed or runtime.stopping:
                    continue
                for timer in runtime.timers:
                    if timer.deadline_ns > now:
                        continue
                    blob = encode_envelope(
                        ElementType.U8, 0, {"ts_send_ns": str(self.hybrid_clock())}, b""
                    )
                    self._deliver(
                        runtime,
                        timer.node_id,
                        proto.Event(proto.EventKind.INPUT, timer.input_id, proto.InlineData(blob)),
                    )
                    fired += 1
                    elapsed = now - timer.base_ns
                    intervals = elapsed // timer.interval_ns + 1
                    timer.deadline_ns = timer.base_ns + intervals * timer.interval_ns
        return fired

    def next_timer_deadline_ns(self):
        with self._lock:
            deadlines = [
                t.deadline_ns
                for rt in self._dataflows.values()
                if rt.barrier_passed and not rt.stopping
                for t in rt.timers
            ]
            return min(deadlines) if deadlines else None

    # -- stop & exit -------------------------------------------------------------------

    def stop_dataflow(self, uuid: str) -> list[str]:
        """Send stop events; returns ids of nodes that have not exited yet."""
        with self._lock:
            runtime = self._runtime(uuid)
            runtime.stopping = True
            remaining = []
            for node_id, node in runtime.nodes.items():
                if node.exited:
                    continue
                remaining.append(node_id)
                node.stop_sent = True
                if node.channel is not None:
                    node.channel.send_event(proto.Event(proto.EventKind.STOP))
            self._audit({"ev": "stop_requested", "uuid": uuid, "remaining": sorted(remaining)})
            if not remaining:
                self._finish_locked(runtime)
            return remaining

    def node_exited(self, uuid: str, node_id: str, exit_code: int) -> bool:
        """Account for a dead node; True when the whole dataflow is finished."""
        with self._lock:
            runtime = self._dataflows.get(uuid)
            if runtime is None:
                return False
            node = runtime.nodes.get(node_id)
            if node is None or node.exited:
                return False
            node.exited = True
            node.exit_code = exit_code
            # force-release anything the dead node still referenced
            for ref in list(runtime.blocks.values()):
                if ref.holders.get(node_id):
                    count = ref.holders.pop(node_id)
                    self._drop_block_refs(runtime, ref, count)
                elif not ref.confirmed and ref.granted_to == node_id:
                    self._drop_block_refs(runtime, ref, ref.pool_refs)
            state = proto.NodeState.FINISHED if exit_code == 0 else proto.NodeState.FAILED
            self._report_status(uuid, node_id, state, f"exit code {exit_code}")
            self._audit({"ev": "node_exited", "uuid": uuid, "node": node_id, "exit_code": exit_code})
            if all(n.exited for n in runtime.nodes.values()):
                self._finish_locked(runtime)
                return True
            self._cascade_stops(runtime)
            return False

    def _cascade_stops(self, runtime):
        """Stop nodes whose every input source has exited.

        A bounded pipeline then winds down by itself: when the last producer
        feeding a consumer is gone, the consumer receives a stop instead of
        waiting forever. Nodes without declared inputs and nodes fed by
        timers or remote machines are never stopped this way.
        """
        for node in runtime.nodes.values():
            if node.exited or node.stop_sent or not node.declared_inputs:
                continue
            if node.has_remote_inputs:
                continue
            alive = False
            for src in node.declared_inputs.values():
                if isinstance(src, TimerInput):
                    alive = True
                    break
                producer = runtime.nodes.get(src.node_id)
                if producer is None or not producer.exited:
                    # unknown producers are remote or dangling; assume alive
                    alive = True
                    break
            if not alive:
                node.stop_sent = True
                self._audit({"ev": "input_sources_exhausted", "uuid": runtime.uuid, "node": node.spec_id})
                if node.channel is not None:
                    node.channel.send_event(proto.Event(proto.EventKind.STOP))

    def _finish_locked(self, runtime):
        if runtime.finished:
            return
        runtime.finished = True
        for ref in list(runtime.blocks.values()):
            self._drop_block_refs(runtime, ref, ref.pool_refs)
        stats = self.pool.stats()
        self._audit(
            {
                "ev": "dataflow_finished",
                "uuid": runtime.uuid,
                "in_use_blocks": stats.in_use_blocks,
                "exit_codes": {n.spec_id: n.exit_code for n in runtime.nodes.values()},
            }
        )
        del self._dataflows[runtime.uuid]
        self._dataflow_finished(runtime.uuid)

    def dataflow_failed(self, uuid: str) -> bool:
        with self._lock:
            runtime = self._dataflows.get(uuid)
            if runtime is None:
                return False
            return any(n.exited and n.exit_code != 0 for n in runtime.nodes.values())

    # -- introspection ------------------------------------------------------------------

    def running_dataflows(self) -> list[str]:
        with self._lock:
            return sorted(self._dataflows)

    def live_nodes(self, uuid: str) -> list[str]:
        with self._lock:
            runtime = self._dataflows.get(uuid)
            if runtime is None:
                return []
            return sorted(n.spec_id for n in runtime.nodes.values() if not n.exited)

    def _runtime(self, uuid: str) -> _DataflowRuntime:
        runtime = self._dataflows.get(uuid)
        if runtime is None:
            raise errors.UnknownDataflow(f"no dataflow {uuid}")
        return runtime

    @staticmethod
    def _node(runtime, node_id: str) -> _NodeRuntime:
        node = runtime.nodes.get(node_id)
        if node is None:
            raise errors.UnknownDataflow(f"no node {node_id} in dataflow {runtime.uuid}")
        return node
