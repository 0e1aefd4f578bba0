"""Framed binary control protocol.

One frame = 4-byte little-endian body length + body. The body is a tagged
message: 1 tag byte followed by the tag's fields in fixed order. Text fields
are 2-byte length + UTF-8, blobs are 4-byte length + raw bytes, enums are one
byte. Every message round-trips bit-exactly, which keeps golden-file and
fuzz testing trivial.

The same protocol runs on every channel: coordinator<->daemon,
daemon<->daemon (remote data), node<->daemon, and CLI<->coordinator.
Payload-carrying messages (RemoteOutput, inline Event data) embed envelope
bytes verbatim — the protocol never transforms payloads.
"""

from __future__ import annotations

import enum
import socket
import struct
import threading
import time
from dataclasses import dataclass

from . import errors

MAX_FRAME_LEN = 64 * 1024 * 1024  # hard default; callers may lower it

MAX_TEXT = 0xFFFF
MAX_BLOB = 0xFFFF_FFFF


class Tag(enum.IntEnum):
    REGISTER_DAEMON = 1
    SPAWN_DATAFLOW = 2
    SPAWN_RESULT = 3
    ALL_NODES_READY = 4
    NODE_STATUS = 5
    STOP_DATAFLOW = 6
    DATAFLOW_FINISHED = 7
    REMOTE_OUTPUT = 8
    REGISTER_NODE = 9
    NODE_READY = 10
    EVENT = 11
    SEND_OUTPUT = 12
    DATA_DROPPED = 13
    CLI_REQUEST = 14
    CLI_REPLY = 15
    BLOCK_GRANT = 16
    LOGS_REQUEST = 17
    LOGS_REPLY = 18
    HEARTBEAT = 19
    REGISTER_RECLAIM = 20


class NodeState(enum.IntEnum):
    SPAWNED = 0
    READY = 1
    RUNNING = 2
    FINISHED = 3
    FAILED = 4


class EventKind(enum.IntEnum):
    INPUT = 0
    STOP = 1


class CliVerb(enum.IntEnum):
    START = 0
    STOP = 1
    LIST = 2
    LOGS = 3
    DESTROY = 4
    CHECK = 5


# --- data locations ----------------------------------------------------------
# 0 = inline envelope bytes; 1 = shared-memory region holding the envelope;
# 2 = size-only request (first leg of the node's two-phase large output).

@dataclass(frozen=True)
class InlineData:
    blob: bytes

    CODE = 0


@dataclass(frozen=True)
class ShmData:
    os_name: str
    offset: int
    length: int
    generation: int

    CODE = 1


@dataclass(frozen=True)
class SizeRequest:
    total_size: int

    CODE = 2


DataLocation = InlineData | ShmData | SizeRequest


# --- messages ----------------------------------------------------------------

@dataclass(frozen=True)
class RegisterDaemon:
    machine_id: str
    data_addr: str  # host:port where this daemon accepts RemoteOutput frames

    TAG = Tag.REGISTER_DAEMON


@dataclass(frozen=True)
class SpawnDataflow:
    dataflow_uuid: str
    subdataflow: bytes  # canonical JSON (see dfspec.subdataflow_to_json)

    TAG = Tag.SPAWN_DATAFLOW


@dataclass(frozen=True)
class SpawnResult:
    dataflow_uuid: str
    ok: bool
    error: str = ""

    TAG = Tag.SPAWN_RESULT


@dataclass(frozen=True)
class AllNodesReady:
    dataflow_uuid: str

    TAG = Tag.ALL_NODES_READY


@dataclass(frozen=True)
class NodeStatus:
    dataflow_uuid: str
    node_id: str
    state: NodeState
    detail: str = ""

    TAG = Tag.NODE_STATUS


@dataclass(frozen=True)
class StopDataflow:
    dataflow_uuid: str

    TAG = Tag.STOP_DATAFLOW


@dataclass(frozen=True)
class DataflowFinished:
    dataflow_uuid: str

    TAG = Tag.DATAFLOW_FINISHED


@dataclass(frozen=True)
class RemoteOutput:
    dataflow_uuid: str
    node_id: str
    output_id: str
    envelope: bytes

    TAG = Tag.REMOTE_OUTPUT


@dataclass(frozen=True)
class RegisterNode:
    dataflow_uuid: str
    node_id: str

    TAG = Tag.REGISTER_NODE


@dataclass(frozen=True)
class NodeReady:
    TAG = Tag.NODE_READY


@dataclass(frozen=True)
class Event:
    kind: EventKind
    input_id: str = ""
    data: DataLocation | None = None  # present iff kind == INPUT

    TAG = Tag.EVENT


@dataclass(frozen=True)
class SendOutput:
    output_id: str
    data: DataLocation

    TAG = Tag.SEND_OUTPUT


@dataclass(frozen=True)
class DataDropped:
    os_name: str
    generation: int

    TAG = Tag.DATA_DROPPED


@dataclass(frozen=True)
class CliRequest:
    verb: CliVerb
    args: tuple[str, ...] = ()

    TAG = Tag.CLI_REQUEST


@dataclass(frozen=True)
class CliReply:
    ok: bool
    items: tuple[str | bytes, ...] = ()

    TAG = Tag.CLI_REPLY


@dataclass(frozen=True)
class BlockGrant:
    ok: bool
    os_name: str = ""
    offset: int = 0
    length: int = 0
    generation: int = 0
    error: str = ""

    TAG = Tag.BLOCK_GRANT


@dataclass(frozen=True)
class LogsRequest:
    dataflow_uuid: str
    node_id: str

    TAG = Tag.LOGS_REQUEST


@dataclass(frozen=True)
class LogsReply:
    ok: bool
    content: bytes = b""

    TAG = Tag.LOGS_REPLY


@dataclass(frozen=True)
class Heartbeat:
    machine_id: str

    TAG = Tag.HEARTBEAT


@dataclass(frozen=True)
class RegisterReclaim:
    """Opens a node's reclamation channel.

    Reference drops are latency-insensitive, so they travel on a dedicated
    connection the daemon drains lazily instead of sleeping on — keeping the
    receiving node's hot path free of reclamation bookkeeping.
    """

    dataflow_uuid: str
    node_id: str

    TAG = Tag.REGISTER_RECLAIM


ControlMessage = (
    RegisterDaemon | SpawnDataflow | SpawnResult | AllNodesReady | NodeStatus
    | StopDataflow | DataflowFinished | RemoteOutput | RegisterNode | NodeReady
    | Event | SendOutput | DataDropped | CliRequest | CliReply | BlockGrant
    | LogsRequest | LogsReply | Heartbeat | RegisterReclaim
)


# --- primitive (de)serialization ----------------------------------------------

class _Writer:
    __slots__ = ("parts",)

    def __init__(self):
        self.parts: list[bytes] = []

    def u8(self, v: int):
        self.parts.append(struct.pack("<B", v))

    def u64(self, v: int):
        self.parts.append(struct.pack("<Q", v))

    def boolean(self, v: bool):
        self.parts.append(b"\x01" if v else b"\x00")

    def text(self, s: str):
        b = s.encode("utf-8")
        if len(b) > MAX_TEXT:
            raise ValueError(f"text field of {len(b)} bytes exceeds {MAX_TEXT}")
        self.parts.append(struct.pack("<H", len(b)))
        self.parts.append(b)

    def blob(self, b: bytes):
        if len(b) > MAX_BLOB:
            raise ValueError(f"blob of {len(b)} bytes exceeds {MAX_BLOB}")
        self.parts.append(struct.pack("<I", len(b)))
        self.parts.append(bytes(b))

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise errors.Truncated(f"message body ends inside a field at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def boolean(self) -> bool:
        return self._take(1)[0] != 0

    def text(self) -> str:
        (n,) = struct.unpack("<H", self._take(2))
        try:
            return self._take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise errors.Truncated("text field is not valid UTF-8") from None

    def blob(self) -> bytes:
        (n,) = struct.unpack("<I", self._take(4))
        return self._take(n)

    def done(self):
        if self.pos != len(self.buf):
            raise errors.Truncated(f"{len(self.buf) - self.pos} trailing bytes after message")


def _enum(reader_value: int, cls, what: str):
    try:
        return cls(reader_value)
    except ValueError:
        raise errors.Truncated(f"invalid {what} code {reader_value}") from None


def _write_location(w: _Writer, loc: DataLocation):
    if isinstance(loc, InlineData):
        w.u8(InlineData.CODE)
        w.blob(loc.blob)
    elif isinstance(loc, ShmData):
        w.u8(ShmData.CODE)
        w.text(loc.os_name)
        w.u64(loc.offset)
        w.u64(loc.length)
        w.u64(loc.generation)
    elif isinstance(loc, SizeRequest):
        w.u8(SizeRequest.CODE)
        w.u64(loc.total_size)
    else:
        raise TypeError(f"not a data location: {loc!r}")


def _read_location(r: _Reader) -> DataLocation:
    code = r.u8()
    if code == InlineData.CODE:
        return InlineData(r.blob())
    if code == ShmData.CODE:
        return ShmData(r.text(), r.u64(), r.u64(), r.u64())
    if code == SizeRequest.CODE:
        return SizeRequest(r.u64())
    raise errors.Truncated(f"invalid data location code {code}")


def encode_message(msg: ControlMessage) -> bytes:
    w = _Writer()
    w.u8(int(msg.TAG))
    t = msg.TAG
    if t == Tag.REGISTER_DAEMON:
        w.text(msg.machine_id)
        w.text(msg.data_addr)
    elif t == Tag.SPAWN_DATAFLOW:
        w.text(msg.dataflow_uuid)
        w.blob(msg.subdataflow)
    elif t == Tag.SPAWN_RESULT:
        w.text(msg.dataflow_uuid)
        w.boolean(msg.ok)
        w.text(msg.error)
    elif t == Tag.ALL_NODES_READY:
        w.text(msg.dataflow_uuid)
    elif t == Tag.NODE_STATUS:
        w.text(msg.dataflow_uuid)
        w.text(msg.node_id)
        w.u8(int(msg.state))
        w.text(msg.detail)
    elif t == Tag.STOP_DATAFLOW:
        w.text(msg.dataflow_uuid)
    elif t == Tag.DATAFLOW_FINISHED:
        w.text(msg.dataflow_uuid)
    elif t == Tag.REMOTE_OUTPUT:
        w.text(msg.dataflow_uuid)
        w.text(msg.node_id)
        w.text(msg.output_id)
        w.blob(msg.envelope)
    elif t == Tag.REGISTER_NODE:
        w.text(msg.dataflow_uuid)
        w.text(msg.node_id)
    elif t == Tag.NODE_READY:
        pass
    elif t == Tag.EVENT:
        w.u8(int(msg.kind))
        if msg.kind == EventKind.INPUT:
            w.text(msg.input_id)
            _write_location(w, msg.data)
    elif t == Tag.SEND_OUTPUT:
        w.text(msg.output_id)
        _write_location(w, msg.data)
    elif t == Tag.DATA_DROPPED:
        w.text(msg.os_name)
        w.u64(msg.generation)
    elif t == Tag.CLI_REQUEST:
        w.u8(int(msg.verb))
        if len(msg.args) > 0xFFFF:
            raise ValueError("too many CLI arguments")
        w.parts.append(struct.pack("<H", len(msg.args)))
        for a in msg.args:
            w.text(a)
    elif t == Tag.CLI_REPLY:
        w.boolean(msg.ok)
        if len(msg.items) > 0xFFFF:
            raise ValueError("too many CLI reply items")
        w.parts.append(struct.pack("<H", len(msg.items)))
        for item in msg.items:
            if isinstance(item, str):
                w.u8(0)
                w.text(item)
            else:
                w.u8(1)
                w.blob(item)
    elif t == Tag.BLOCK_GRANT:
        w.boolean(msg.ok)
        w.text(msg.os_name)
        w.u64(msg.offset)
        w.u64(msg.length)
        w.u64(msg.generation)
        w.text(msg.error)
    elif t == Tag.LOGS_REQUEST:
        w.text(msg.dataflow_uuid)
        w.text(msg.node_id)
    elif t == Tag.LOGS_REPLY:
        w.boolean(msg.ok)
        w.blob(msg.content)
    elif t == Tag.HEARTBEAT:
        w.text(msg.machine_id)
    elif t == Tag.REGISTER_RECLAIM:
        w.text(msg.dataflow_uuid)
        w.text(msg.node_id)
    else:  # pragma: no cover - all tags handled above
        raise TypeError(f"unencodable message {msg!r}")
    return w.getvalue()


def decode_message(body: bytes) -> ControlMessage:
    if len(body) > MAX_FRAME_LEN:
        raise errors.OversizeFrame(f"message body of {len(body)} bytes exceeds {MAX_FRAME_LEN}")
    r = _Reader(bytes(body))
    if len(r.buf) < 1:
        raise errors.Truncated("empty message body")
    tag_value = r.u8()
    try:
        t = Tag(tag_value)
    except ValueError:
        raise errors.UnknownTag(f"unknown message tag {tag_value}") from None
    if t == Tag.REGISTER_DAEMON:
        msg = RegisterDaemon(r.text(), r.text())
    elif t == Tag.SPAWN_DATAFLOW:
        msg = SpawnDataflow(r.text(), r.blob())
    elif t == Tag.SPAWN_RESULT:
        msg = SpawnResult(r.text(), r.boolean(), r.text())
    elif t == Tag.ALL_NODES_READY:
        msg = AllNodesReady(r.text())
    elif t == Tag.NODE_STATUS:
        msg = NodeStatus(r.text(), r.text(), _enum(r.u8(), NodeState, "node state"), r.text())
    elif t == Tag.STOP_DATAFLOW:
        msg = StopDataflow(r.text())
    elif t == Tag.DATAFLOW_FINISHED:
        msg = DataflowFinished(r.text())
    elif t == Tag.REMOTE_OUTPUT:
        msg = RemoteOutput(r.text(), r.text(), r.text(), r.blob())
    elif t == Tag.REGISTER_NODE:
        msg = RegisterNode(r.text(), r.text())
    elif t == Tag.NODE_READY:
        msg = NodeReady()
    elif t == Tag.EVENT:
        kind = _enum(r.u8(), EventKind, "event kind")
        if kind == EventKind.INPUT:
            msg = Event(kind, r.text(), _read_location(r))
        else:
            msg = Event(kind)
    elif t == Tag.SEND_OUTPUT:
        msg = SendOutput(r.text(), _read_location(r))
    elif t == Tag.DATA_DROPPED:
        msg = DataDropped(r.text(), r.u64())
    elif t == Tag.CLI_REQUEST:
        verb = _enum(r.u8(), CliVerb, "CLI verb")
        (n,) = struct.unpack("<H", r._take(2))
        msg = CliRequest(verb, tuple(r.text() for _ in range(n)))
    elif t == Tag.CLI_REPLY:
        ok = r.boolean()
        (n,) = struct.unpack("<H", r._take(2))
        items = []
        for _ in range(n):
            kind = r.u8()
            if kind == 0:
                items.append(r.text())
            elif kind == 1:
                items.append(r.blob())
            else:
                raise errors.Truncated(f"invalid CLI reply item kind {kind}")
        msg = CliReply(ok, tuple(items))
    elif t == Tag.BLOCK_GRANT:
        msg = BlockGrant(r.boolean(), r.text(), r.u64(), r.u64(), r.u64(), r.text())
    elif t == Tag.LOGS_REQUEST:
        msg = LogsRequest(r.text(), r.text())
    elif t == Tag.LOGS_REPLY:
        msg = LogsReply(r.boolean(), r.blob())
    elif t == Tag.HEARTBEAT:
        msg = Heartbeat(r.text())
    elif t == Tag.REGISTER_RECLAIM:
        msg = RegisterReclaim(r.text(), r.text())
    else:  # pragma: no cover
        raise errors.UnknownTag(f"unknown message tag {tag_value}")
    r.done()
    return msg


# --- framing over byte streams -------------------------------------------------

class SocketStream:
    """Length-prefixed framing over a connected socket.

    One concurrent reader and one concurrent writer are supported; writes are
    serialized internally so concurrent senders cannot interleave frames.
    Partial reads (timeouts) keep their progress, so a timed-out read can be
    retried without corrupting the stream.
    """

    def __init__(self, sock: socket.socket, max_frame_len: int = MAX_FRAME_LEN):
        self.sock = sock
        self.max_frame_len = max_frame_len
        self._rbuf = bytearray()
        self._want = None  # frame length currently being read, if known
        self._eof = False
        self._wlock = threading.Lock()
        self._last_timeout = sock.gettimeout()

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass

    def _set_timeout(self, timeout):
        # settimeout issues syscalls on every call; skip redundant changes
        if timeout != self._last_timeout:
            self.sock.settimeout(timeout)
            self._last_timeout = timeout

    def _fill(self, target: int, deadline=None) -> bool:
        """Grow the read buffer to ``target`` bytes; False on timeout."""
        while len(self._rbuf) < target:
            if deadline is not None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self.sock.settimeout(remaining)
                self._last_timeout = remaining
            else:
                self._set_timeout(None)
            try:
                chunk = self.sock.recv(min(1 << 20, max(4096, target - len(self._rbuf))))
            except socket.timeout:
                return False
            except OSError as exc:
                raise errors.ConnectionClosed(f"connection error: {exc}") from None
            if not chunk:
                if self._rbuf or self._want is not None:
                    raise errors.Truncated("peer closed mid-frame")
                raise errors.ConnectionClosed("peer closed the connection")
            self._rbuf.extend(chunk)
        return True

    def read_message(self, timeout: float | None = None):
        """Next message, or None if ``timeout`` elapses first."""
        deadline = None if timeout is None else time.monotonic() + timeout
        if self._want is None:
            if not self._fill(4, deadline):
                return None
            (length,) = struct.unpack("<I", bytes(self._rbuf[:4]))
            if length > self.max_frame_len:
                raise errors.OversizeFrame(f"frame of {length} bytes exceeds limit {self.max_frame_len}")
            self._want = length
        if not self._fill(4 + self._want, deadline):
            return None
        body = bytes(self._rbuf[4 : 4 + self._want])
        del self._rbuf[: 4 + self._want]
        self._want = None
        return decode_message(body)

    def drain_messages(self) -> list:
        """All complete frames available right now, without ever blocking.

        Used by pollers that must not sleep inside recv (a sender waking a
        recv-blocked peer is charged the wakeup). Raises ConnectionClosed
        once the peer has gone away and every buffered frame was returned.
        """
        if self._eof:
            if self._rbuf or self._want is not None:
                raise errors.Truncated("peer closed mid-frame")
            raise errors.ConnectionClosed("peer closed the connection")
        self._set_timeout(0.0)
        while True:
            try:
                chunk = self.sock.recv(1 << 16)
            except (BlockingIOError, socket.timeout, InterruptedError):
                break
            except OSError as exc:
                raise errors.ConnectionClosed(f"connection error: {exc}") from None
            if not chunk:
                self._eof = True
                break
            self._rbuf.extend(chunk)
        out = []
        while True:
            if self._want is None:
                if len(self._rbuf) < 4:
                    break
                (length,) = struct.unpack("<I", bytes(self._rbuf[:4]))
                if length > self.max_frame_len:
                    raise errors.OversizeFrame(f"frame of {length} bytes exceeds limit {self.max_frame_len}")
                self._want = length
            if len(self._rbuf) < 4 + self._want:
                break
            body = bytes(self._rbuf[4 : 4 + self._want])
            del self._rbuf[: 4 + self._want]
            self._want = None
            out.append(decode_message(body))
        return out

    def write_message(self, msg: ControlMessage):
        body = encode_message(msg)
        if len(body) > self.max_frame_len:
            raise errors.OversizeFrame(f"frame of {len(body)} bytes exceeds limit {self.max_frame_len}")
        frame = struct.pack("<I", len(body)) + body
        with self._wlock:
            try:
                self.sock.sendall(frame)
            except OSError as exc:
                raise errors.ConnectionClosed(f"connection error: {exc}") from None


def read_frame(stream: SocketStream) -> ControlMessage:
    """Blocking read of the next message from a stream."""
    return stream.read_message(None)


def write_frame(stream: SocketStream, msg: ControlMessage):
    """Write one message as a single frame."""
    stream.write_message(msg)
