"""Unified message layout: one binary representation for node memory, shared
memory, and the wire.

A message is a self-describing contiguous byte sequence (an *envelope*).
Because the storage format and the transmission format are the same bytes,
local delivery never serializes: the sender writes the envelope once into a
shared-memory block and every receiver parses the 24-byte header plus the
(small) metadata section in place. The payload is exposed as a view into the
backing buffer and is never touched by decode.

Format version 1, all integers little-endian:

    offset 0   magic            4 bytes  = 44 4F 52 41 ("DORA")
    offset 4   version          1 byte   = 1
    offset 5   element type     1 byte   (ElementType code)
    offset 6   reserved         2 bytes  = 0
    offset 8   element count    8 bytes
    offset 16  metadata length  4 bytes  (bytes in the metadata section)
    offset 20  payload offset   4 bytes  (smallest multiple of 64 >= 24+mlen)
    offset 24  metadata section: entry count (2 bytes) then per entry
               key length (2 bytes), key (ASCII), value length (4 bytes),
               value (UTF-8)
    ...        zero padding up to the payload offset
    payload offset  payload     element count * element width bytes

Total envelope size = payload offset + payload length. Buffers longer than
the total are permitted (e.g. a pool block with slack capacity); the extra
bytes are ignored.

Hot kernels (header/metadata pack and parse) are provided twice: a compiled
extension (miniflow.envelope._codec) and the pure-Python routines below. The
compiled form is selected at import when available; MINIFLOW_PURE_PYTHON=1
forces the fallback. Instrumented region objects always take the pure path,
which is what the zero-copy proofs in the test suite rely on.
"""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Mapping

from .. import errors

MAGIC = b"DORA"
VERSION = 1
HEADER_SIZE = 24
PAYLOAD_ALIGN = 64

MAX_KEY_LEN = 0xFFFF
MAX_VALUE_LEN = 0xFFFF_FFFF
MAX_METADATA_ENTRIES = 0xFFFF
MAX_METADATA_LEN = 0xFFFF_FFFF

_HEADER = struct.Struct("<4sBBHQII")


class ElementType(enum.IntEnum):
    U8 = 0
    I8 = 1
    U16 = 2
    I16 = 3
    U32 = 4
    I32 = 5
    U64 = 6
    I64 = 7
    F32 = 8
    F64 = 9

    @property
    def width(self) -> int:
        return _WIDTHS[self.value]


_WIDTHS = (1, 1, 2, 2, 4, 4, 8, 8, 4, 8)

MetadataLike = Mapping[str, str] | Iterable[tuple[str, str]]


@dataclass(frozen=True)
class Layout:
    metadata_len: int
    payload_offset: int
    total_size: int


@dataclass(frozen=True)
class Violation:
    code: str
    detail: str

    def __str__(self) -> str:
        return f"{self.code}: {self.detail}"


class Envelope:
    """Decoded view of an envelope. The payload aliases the source buffer."""

    __slots__ = ("element_type", "element_count", "metadata", "payload_offset", "_region")

    def __init__(self, element_type, element_count, metadata, payload_offset, region):
        self.element_type = element_type
        self.element_count = element_count
        self.metadata = metadata
        self.payload_offset = payload_offset
        self._region = region

    @property
    def payload_len(self) -> int:
        return self.element_count * self.element_type.width

    @property
    def total_size(self) -> int:
        return self.payload_offset + self.payload_len

    @property
    def payload(self):
        """View of the payload bytes; no copy is made."""
        return self._region.view(self.payload_offset, self.payload_len)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Envelope):
            return NotImplemented
        return (
            self.element_type == other.element_type
            and self.element_count == other.element_count
            and self.metadata == other.metadata
            and bytes(self.payload) == bytes(other.payload)
        )

    def __repr__(self) -> str:
        return (
            f"Envelope({self.element_type.name}, count={self.element_count}, "
            f"metadata={self.metadata!r}, payload_offset={self.payload_offset})"
        )


class BufferRegion:
    """Adapter giving any buffer-protocol object the region interface.

    ``get`` materializes bytes (used for header/metadata only); ``view``
    returns an aliasing memoryview slice and never copies. Tests substitute
    instrumented regions with the same three methods to prove which byte
    ranges an operation touched.
    """

    __slots__ = ("_mv",)

    def __init__(self, buf):
        mv = buf if isinstance(buf, memoryview) else memoryview(buf)
        if mv.ndim != 1 or mv.itemsize != 1:
            mv = mv.cast("B")
        self._mv = mv

    def __len__(self) -> int:
        return len(self._mv)

    def get(self, offset: int, size: int) -> bytes:
        return bytes(self._mv[offset : offset + size])

    def view(self, offset: int, size: int):
        return self._mv[offset : offset + size]


def _is_region(obj) -> bool:
    return hasattr(obj, "get") and hasattr(obj, "view") and not isinstance(obj, memoryview)


def _as_region(buf) -> BufferRegion:
    return buf if _is_region(buf) else BufferRegion(buf)


def _as_byte_view(buffer) -> memoryview:
    mv = buffer if isinstance(buffer, memoryview) else memoryview(buffer)
    if mv.ndim != 1 or mv.itemsize != 1:
        mv = mv.cast("B")
    return mv


def _check_metadata(metadata: MetadataLike) -> list[tuple[bytes, bytes]]:
    pairs = metadata.items() if isinstance(metadata, Mapping) else metadata
    out = []
    seen = set()
    for key, value in pairs:
        if key in seen:
            raise errors.DuplicateKey(f"duplicate metadata key {key!r}")
        seen.add(key)
        try:
            kb = key.encode("ascii")
        except UnicodeEncodeError:
            raise errors.MalformedMetadata(f"metadata key {key!r} is not ASCII") from None
        vb = value.encode("utf-8")
        if len(kb) > MAX_KEY_LEN:
            raise errors.MetadataTooLarge(f"metadata key of {len(kb)} bytes exceeds {MAX_KEY_LEN}")
        if len(vb) > MAX_VALUE_LEN:
            raise errors.MetadataTooLarge(f"metadata value of {len(vb)} bytes exceeds {MAX_VALUE_LEN}")
        out.append((kb, vb))
    if len(out) > MAX_METADATA_ENTRIES:
        raise errors.MetadataTooLarge(f"{len(out)} metadata entries exceed {MAX_METADATA_ENTRIES}")
    return out


def _metadata_len(pairs: list[tuple[bytes, bytes]]) -> int:
    mlen = 2 + sum(6 + len(kb) + len(vb) for kb, vb in pairs)
    if mlen > MAX_METADATA_LEN:
        raise errors.MetadataTooLarge(f"metadata section of {mlen} bytes exceeds {MAX_METADATA_LEN}")
    return mlen


def _metadata_section(pairs: list[tuple[bytes, bytes]]) -> bytes:
    parts = [struct.pack("<H", len(pairs))]
    for kb, vb in pairs:
        parts.append(struct.pack("<H", len(kb)))
        parts.append(kb)
        parts.append(struct.pack("<I", len(vb)))
        parts.append(vb)
    return b"".join(parts)


def _align(n: int) -> int:
    return (n + PAYLOAD_ALIGN - 1) // PAYLOAD_ALIGN * PAYLOAD_ALIGN


def compute_layout(element_type: ElementType, element_count: int, metadata: MetadataLike) -> Layout:
    """Sizes of the would-be envelope, known before any byte is written.

    Needed up front so a shared-memory block of the right size can be
    acquired and the envelope encoded directly into it.
    """
    element_type = ElementType(element_type)
    if element_count < 0:
        raise ValueError("element_count must be >= 0")
    mlen = _metadata_len(_check_metadata(metadata))
    payload_offset = _align(HEADER_SIZE + mlen)
    return Layout(mlen, payload_offset, payload_offset + element_count * element_type.width)


def encode_into(buffer, element_type: ElementType, element_count: int, metadata: MetadataLike, payload) -> int:
    """Write a complete envelope into ``buffer``; returns total bytes written.

    ``payload`` is either a bytes-like object (copied with one slice
    assignment) or any object with ``copy_into(view)`` and ``__len__``; the
    payload bytes are consumed exactly once either way.
    """
    element_type = ElementType(element_type)
    pairs = _check_metadata(metadata)
    mlen = _metadata_len(pairs)
    payload_offset = _align(HEADER_SIZE + mlen)
    payload_len = element_count * element_type.width
    total = payload_offset + payload_len
    if len(payload) != payload_len:
        raise ValueError(f"payload is {len(payload)} bytes but element_count * width = {payload_len}")

    mv = _as_byte_view(buffer)
    if mv.readonly:
        raise TypeError("target buffer is read-only")
    if len(mv) < total:
        raise errors.BufferTooSmall(f"need {total} bytes, buffer has {len(mv)}")

    if _pack_prefix is not None:
        _pack_prefix(mv, int(element_type), element_count, pairs, mlen, payload_offset)
    else:
        _HEADER.pack_into(mv, 0, MAGIC, VERSION, int(element_type), 0, element_count, mlen, payload_offset)
        section = _metadata_section(pairs)
        mv[HEADER_SIZE : HEADER_SIZE + mlen] = section
        if payload_offset > HEADER_SIZE + mlen:
            mv[HEADER_SIZE + mlen : payload_offset] = bytes(payload_offset - HEADER_SIZE - mlen)
    if payload_len:
        dest = mv[payload_offset:total]
        if hasattr(payload, "copy_into"):
            payload.copy_into(dest)
        else:
            dest[:] = payload
    return total


def encode(element_type: ElementType, element_count: int, metadata: MetadataLike, payload) -> bytes:
    """Encode into a fresh buffer (convenience path for small messages)."""
    layout = compute_layout(element_type, element_count, metadata)
    buf = bytearray(layout.total_size)
    encode_into(buf, element_type, element_count, metadata, payload)
    return bytes(buf)


def _parse_metadata(section: bytes) -> dict[str, str]:
    if len(section) < 2:
        raise errors.MalformedMetadata("metadata section shorter than its entry count field")
    (count,) = struct.unpack_from("<H", section, 0)
    pos = 2
    meta: dict[str, str] = {}
    for _ in range(count):
        if pos + 2 > len(section):
            raise errors.MalformedMetadata("truncated metadata key length")
        (klen,) = struct.unpack_from("<H", section, pos)
        pos += 2
        if pos + klen + 4 > len(section):
            raise errors.MalformedMetadata("truncated metadata key or value length")
        try:
            key = section[pos : pos + klen].decode("ascii")
        except UnicodeDecodeError:
            raise errors.MalformedMetadata("metadata key is not ASCII") from None
        pos += klen
        (vlen,) = struct.unpack_from("<I", section, pos)
        pos += 4
        if pos + vlen > len(section):
            raise errors.MalformedMetadata("truncated metadata value")
        try:
            value = section[pos : pos + vlen].decode("utf-8")
        except UnicodeDecodeError:
            raise errors.MalformedMetadata("metadata value is not UTF-8") from None
        pos += vlen
        if key in meta:
            raise errors.MalformedMetadata(f"duplicate metadata key {key!r}")
        meta[key] = value
    if pos != len(section):
        raise errors.MalformedMetadata(f"{len(section) - pos} trailing bytes in metadata section")
    return meta


def _decode_header(header: bytes, buflen: int):
    magic, version, etype_code, _reserved, count, mlen, payload_offset = _HEADER.unpack(header)
    if magic != MAGIC:
        raise errors.BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise errors.UnsupportedVersion(f"unsupported format version {version}")
    if etype_code >= len(_WIDTHS):
        raise errors.BadElementType(f"invalid element type code {etype_code}")
    etype = ElementType(etype_code)
    if HEADER_SIZE + mlen > buflen:
        raise errors.TruncatedBuffer(f"metadata section of {mlen} bytes exceeds buffer of {buflen}")
    if payload_offset < HEADER_SIZE + mlen:
        raise errors.MalformedMetadata(
            f"payload offset {payload_offset} overlaps metadata ending at {HEADER_SIZE + mlen}"
        )
    if payload_offset % PAYLOAD_ALIGN:
        raise errors.MalformedMetadata(f"payload offset {payload_offset} is not {PAYLOAD_ALIGN}-byte aligned")
    total = payload_offset + count * etype.width
    if total > buflen:
        raise errors.TruncatedBuffer(f"declared envelope of {total} bytes exceeds buffer of {buflen}")
    return etype, count, mlen, payload_offset


def decode(buffer) -> Envelope:
    """Parse an envelope, reading only the header and metadata bytes.

    The returned Envelope's payload is a view into ``buffer``; decode itself
    never reads or copies a payload byte.
    """
    if _parse is not None and not _is_region(buffer):
        region = BufferRegion(buffer)
        etype_code, count, meta, payload_offset = _parse(region._mv)
        return Envelope(ElementType(etype_code), count, meta, payload_offset, region)
    region = _as_region(buffer)
    buflen = len(region)
    if buflen < HEADER_SIZE:
        raise errors.TruncatedBuffer(f"buffer of {buflen} bytes is shorter than the {HEADER_SIZE}-byte header")
    etype, count, mlen, payload_offset = _decode_header(region.get(0, HEADER_SIZE), buflen)
    meta = _parse_metadata(region.get(HEADER_SIZE, mlen))
    return Envelope(etype, count, meta, payload_offset, region)


def validate(buffer) -> list[Violation]:
    """Collect every layout violation instead of stopping at the first.

    Used as a cheap defense on frames arriving from remote daemons; an empty
    list means decode would accept the buffer.
    """
    region = _as_region(buffer)
    buflen = len(region)
    out: list[Violation] = []
    if buflen < HEADER_SIZE:
        return [Violation("truncated", f"buffer of {buflen} bytes is shorter than the header")]
    magic, version, etype_code, reserved, count, mlen, payload_offset = _HEADER.unpack(region.get(0, HEADER_SIZE))
    if magic != MAGIC:
        out.append(Violation("bad_magic", f"magic is {magic!r}"))
    if version != VERSION:
        out.append(Violation("unsupported_version", f"version byte is {version}"))
    if reserved:
        out.append(Violation("reserved_nonzero", f"reserved field is {reserved}"))
    width = None
    if etype_code >= len(_WIDTHS):
        out.append(Violation("bad_element_type", f"element type code {etype_code}"))
    else:
        width = _WIDTHS[etype_code]
    if payload_offset % PAYLOAD_ALIGN:
        out.append(Violation("misaligned_payload", f"payload offset {payload_offset} not {PAYLOAD_ALIGN}-byte aligned"))
    elif payload_offset != _align(HEADER_SIZE + mlen):
        out.append(
            Violation(
                "bad_payload_offset",
                f"payload offset {payload_offset}, expected {_align(HEADER_SIZE + mlen)}",
            )
        )
    if HEADER_SIZE + mlen > buflen:
        out.append(Violation("truncated", f"metadata section of {mlen} bytes exceeds buffer"))
    else:
        try:
            _parse_metadata(region.get(HEADER_SIZE, mlen))
        except errors.MalformedMetadata as exc:
            out.append(Violation("malformed_metadata", str(exc)))
    if width is not None and payload_offset + count * width > buflen:
        out.append(Violation("truncated", f"declared envelope of {payload_offset + count * width} bytes exceeds buffer"))
    return out


_parse = None
_pack_prefix = None
ACTIVE_CODEC = "pure"

if not os.environ.get("MINIFLOW_PURE_PYTHON"):
    try:
        from . import _codec

        _parse = _codec.parse
        _pack_prefix = _codec.pack_prefix
        ACTIVE_CODEC = "compiled"
    except ImportError:
        pass
