"""Envelope format: unified storage/transmission message layout."""

from .format import (
    ACTIVE_CODEC,
    HEADER_SIZE,
    MAGIC,
    PAYLOAD_ALIGN,
    VERSION,
    BufferRegion,
    ElementType,
    Envelope,
    Layout,
    Violation,
    compute_layout,
    decode,
    encode,
    encode_into,
    validate,
)

__all__ = [
    "ACTIVE_CODEC",
    "HEADER_SIZE",
    "MAGIC",
    "PAYLOAD_ALIGN",
    "VERSION",
    "BufferRegion",
    "ElementType",
    "Envelope",
    "Layout",
    "Violation",
    "compute_layout",
    "decode",
    "encode",
    "encode_into",
    "validate",
]
