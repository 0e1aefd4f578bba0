"""Node API: the library a dataflow node links against.

A node is an ordinary process the daemon spawned. It connects back over the
endpoint advertised in MINIFLOW_NODE_ENDPOINT, announces itself, and then
iterates events::

    from miniflow import Node

    node = Node()
    for event in node:
        if event["type"] == "INPUT" and event["id"] == "tick":
            node.send_output("data", payload, {"note": "hi"})

Input payloads arrive as views into shared memory — reading them never
copies. Small outputs travel inline in the control message; large ones use a
two-phase protocol (size request, block grant, in-place encode, confirm) so
the payload is written exactly once, directly into shared memory.
"""

from __future__ import annotations

import atexit
import os
import socket
import threading
import weakref
from collections import deque

from . import errors, proto
from ._clock import hybrid_now_ns
from .envelope import ElementType, Envelope, compute_layout, decode, encode, encode_into

ENV_ENDPOINT = "MINIFLOW_NODE_ENDPOINT"
ENV_DATAFLOW = "MINIFLOW_DATAFLOW_ID"
ENV_NODE = "MINIFLOW_NODE_ID"
ENV_OUTPUTS = "MINIFLOW_NODE_OUTPUTS"
ENV_THRESHOLD = "MINIFLOW_INLINE_THRESHOLD"


class _Sentinel:
    __slots__ = ("name",)

    def __init__(self, name):
        self.name = name

    def __repr__(self):
        return self.name


TIMED_OUT = _Sentinel("TIMED_OUT")
CHANNEL_CLOSED = _Sentinel("CHANNEL_CLOSED")


class NodeEvent:
    """One input (or stop) delivered to the node.

    ``data`` is a zero-copy view; for shared-memory backed events it aliases
    the mapped block, which stays alive until the event is released. Release
    happens explicitly via release(), implicitly when the event object is
    discarded, and at handle teardown — exactly one drop is sent regardless.
    """

    def __init__(self, kind: str, input_id: str = "", envelope: Envelope | None = None,
                 shm: proto.ShmData | None = None, owner: "Node | None" = None):
        self.kind = kind  # "input" | "stop"
        self.id = input_id
        self.envelope = envelope
        self._shm = shm
        self._owner = owner
        self._released = shm is None

    @property
    def data(self):
        return self.envelope.payload if self.envelope is not None else None

    @property
    def metadata(self) -> dict[str, str]:
        return self.envelope.metadata if self.envelope is not None else {}

    def release(self):
        """Drop the shared-memory reference; idempotent."""
        if self._released:
            return
        self._released = True
        owner = self._owner
        if owner is not None:
            owner._send_drop(self._shm)

    def __getitem__(self, key: str):
        if key == "type":
            return "INPUT" if self.kind == "input" else "STOP"
        if key == "id":
            return self.id
        if key in ("value", "data"):
            return self.data
        if key == "metadata":
            return self.metadata
        raise KeyError(key)

    def __repr__(self):
        return f"NodeEvent({self.kind!r}, id={self.id!r})"

    def __del__(self):
        try:
            self.release()
        except Exception:
            pass


class Node:
    """Handle to the daemon; one per process, confined to one thread."""

    _instance_guard = threading.Lock()
    _instantiated = False

    def __init__(self):
        with Node._instance_guard:
            if Node._instantiated:
                raise errors.SecondInit("a Node handle already exists in this process")
            Node._instantiated = True
        try:
            endpoint = _require_env(ENV_ENDPOINT)
            self.dataflow_id = _require_env(ENV_DATAFLOW)
            self.node_id = _require_env(ENV_NODE)
        except errors.MissingEnv:
            with Node._instance_guard:
                Node._instantiated = False
            raise
        self.outputs = tuple(o for o in os.environ.get(ENV_OUTPUTS, "").split(",") if o)
        self.inline_threshold = int(os.environ.get(ENV_THRESHOLD, "4096"))
        self._stream = proto.SocketStream(_connect(endpoint))
        # reference drops travel on their own connection, drained lazily by
        # the daemon, so releasing an event stays off everyone's hot path
        self._reclaim = proto.SocketStream(_connect(endpoint))
        self._pending = deque()
        self._seq: dict[str, int] = {}
        self._read_segments = {}   # os_name -> ShmSegment (read-only)
        self._write_segments = {}  # os_name -> ShmSegment (writable)
        self._outstanding = weakref.WeakSet()
        self._drop_lock = threading.Lock()
        self._closed = False
        self._stopping = False
        self._stream.write_message(proto.RegisterNode(self.dataflow_id, self.node_id))
        self._reclaim.write_message(proto.RegisterReclaim(self.dataflow_id, self.node_id))
        self._stream.write_message(proto.NodeReady())
        atexit.register(self.close)

    # -- events ----------------------------------------------------------------

    def next_event(self, timeout: float | None = None):
        """Next NodeEvent, or TIMED_OUT / CHANNEL_CLOSED."""
        if self._closed or self._stopping:
            return CHANNEL_CLOSED
        if self._pending:
            return self._to_event(self._pending.popleft())
        try:
            msg = self._stream.read_message(timeout)
        except errors.ProtocolError:
            self._closed = True
            return CHANNEL_CLOSED
        if msg is None:
            return TIMED_OUT
        if not isinstance(msg, proto.Event):
            # a grant can only arrive while send_output waits for it; anything
            # else here means the daemon and node disagree about the protocol
            raise errors.ConnectionLost(f"unexpected {type(msg).__name__} outside send_output")
        return self._to_event(msg)

    def __iter__(self):
        while True:
            event = self.next_event(None)
            if event is CHANNEL_CLOSED:
                return
            if event is TIMED_OUT:
                continue
            yield event

    def _to_event(self, msg: proto.Event) -> NodeEvent:
        if msg.kind == proto.EventKind.STOP:
            # after a stop the daemon will close the channel; reading further
            # would only race the shutdown, so report closed from now on
            self._stopping = True
            return NodeEvent("stop")
        loc = msg.data
        if isinstance(loc, proto.InlineData):
            return NodeEvent("input", msg.input_id, decode(loc.blob))
        segment = self._read_segments.get(loc.os_name)
        if segment is None:
            from .shm import attach

            segment = attach(loc.os_name, loc.offset + loc.length)
            self._read_segments[loc.os_name] = segment
        envelope = decode(segment.buf[loc.offset : loc.offset + loc.length])
        event = NodeEvent("input", msg.input_id, envelope, shm=loc, owner=self)
        self._outstanding.add(event)
        return event

    # -- outputs ----------------------------------------------------------------

    def send_output(self, output_id: str, data=b"", metadata=None,
                    element_type: ElementType = ElementType.U8):
        """Publish one output. ``data`` must be bytes-like; metadata is text."""
        if self._closed:
            raise errors.ConnectionLost("node handle is closed")
        if output_id not in self.outputs:
            raise errors.UndeclaredOutput(
                f"output {output_id!r} is not declared for node {self.node_id!r} (declared: {list(self.outputs)})"
            )
        element_type = ElementType(element_type)
        data = data if isinstance(data, (bytes, bytearray, memoryview)) else bytes(data)
        if len(data) % element_type.width:
            raise ValueError(
                f"payload of {len(data)} bytes is not a whole number of {element_type.name} elements"
            )
        count = len(data) // element_type.width
        seq = self._seq.get(output_id, 0)
        self._seq[output_id] = seq + 1
        meta = dict(metadata or {})
        meta["ts_send_ns"] = str(hybrid_now_ns())
        meta["seq"] = str(seq)
        meta["output_id"] = output_id
        meta["node_id"] = self.node_id
        layout = compute_layout(element_type, count, meta)
        try:
            if layout.total_size <= self.inline_threshold:
                blob = encode(element_type, count, meta, data)
                self._stream.write_message(proto.SendOutput(output_id, proto.InlineData(blob)))
            else:
                self._send_large(output_id, element_type, count, meta, data, layout.total_size)
        except errors.ProtocolError as exc:
            self._closed = True
            raise errors.ConnectionLost(str(exc)) from None

    def _send_large(self, output_id, element_type, count, meta, data, total_size):
        self._stream.write_message(proto.SendOutput(output_id, proto.SizeRequest(total_size)))
        grant = self._await_grant()
        if not grant.ok:
            raise errors.OsAllocationFailed(grant.error)
        segment = self._write_segments.get(grant.os_name)
        if segment is None:
            from .shm import attach

            segment = attach(grant.os_name, grant.offset + grant.length, writable=True)
            self._write_segments[grant.os_name] = segment
        written = encode_into(
            segment.buf[grant.offset : grant.offset + grant.length], element_type, count, meta, data
        )
        self._stream.write_message(
            proto.SendOutput(output_id, proto.ShmData(grant.os_name, grant.offset, written, grant.generation))
        )

    def _await_grant(self) -> proto.BlockGrant:
        while True:
            msg = self._stream.read_message(30.0)
            if msg is None:
                raise errors.ConnectionLost("timed out waiting for a block grant")
            if isinstance(msg, proto.BlockGrant):
                return msg
            if isinstance(msg, proto.Event):
                self._pending.append(msg)  # deliver later, in order
            else:
                raise errors.ConnectionLost(f"unexpected {type(msg).__name__} while awaiting grant")

    # -- teardown -----------------------------------------------------------------

    def _send_drop(self, shm: proto.ShmData):
        if self._closed:
            return
        with self._drop_lock:
            try:
                self._reclaim.write_message(proto.DataDropped(shm.os_name, shm.generation))
            except errors.ProtocolError:
                pass  # daemon gone; it force-releases on our exit anyway

    def close(self):
        """Release outstanding events and disconnect; idempotent."""
        if self._closed:
            return
        for event in list(self._outstanding):
            event.release()
        self._closed = True
        self._stream.close()
        self._reclaim.close()
        for segment in list(self._read_segments.values()) + list(self._write_segments.values()):
            segment.close()
        self._read_segments.clear()
        self._write_segments.clear()
        with Node._instance_guard:
            Node._instantiated = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _require_env(name: str) -> str:
    value = os.environ.get(name)
    if not value:
        raise errors.MissingEnv(
            f"{name} is not set; node processes must be spawned by a miniflow daemon"
        )
    return value


def _connect(endpoint: str) -> socket.socket:
    try:
        if endpoint.startswith("unix:"):
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            sock.connect(endpoint[len("unix:") :])
            return sock
        if endpoint.startswith("tcp:"):
            host, port = endpoint[len("tcp:") :].rsplit(":", 1)
            return socket.create_connection((host, int(port)), timeout=10.0)
    except OSError as exc:
        raise errors.ConnectFailed(f"cannot connect to daemon at {endpoint}: {exc}") from None
    raise errors.ConnectFailed(f"unrecognized endpoint {endpoint!r}")
