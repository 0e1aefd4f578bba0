# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled envelope codec kernels.

Same byte-for-byte behaviour as the pure-Python routines in format.py; the
pure implementation is the reference and the parity test in the suite holds
the two to identical outputs and identical error classes. Only the header and
metadata sections are handled here — payload movement is a single memcpy in
the caller either way, and decode never touches payload bytes at all.
"""

from cpython.bytes cimport PyBytes_FromStringAndSize
from cpython.unicode cimport PyUnicode_DecodeASCII, PyUnicode_DecodeUTF8
from libc.string cimport memcpy, memset

from miniflow import errors

DEF HEADER_SIZE = 24
DEF PAYLOAD_ALIGN = 64

cdef const unsigned char* MAGIC = b"DORA"

# element widths indexed by type code
cdef unsigned char[10] WIDTHS
WIDTHS[0] = 1; WIDTHS[1] = 1; WIDTHS[2] = 2; WIDTHS[3] = 2
WIDTHS[4] = 4; WIDTHS[5] = 4; WIDTHS[6] = 8; WIDTHS[7] = 8
WIDTHS[8] = 4; WIDTHS[9] = 8


cdef inline unsigned int rd_u16(const unsigned char* p):
    return p[0] | (p[1] << 8)


cdef inline unsigned long rd_u32(const unsigned char* p):
    return p[0] | (p[1] << 8) | (p[2] << 16) | (<unsigned long> p[3] << 24)


cdef inline unsigned long long rd_u64(const unsigned char* p):
    cdef unsigned long long v = 0
    cdef int i
    for i in range(8):
        v |= (<unsigned long long> p[i]) << (8 * i)
    return v


cdef inline void wr_u16(unsigned char* p, unsigned int v):
    p[0] = v & 0xFF
    p[1] = (v >> 8) & 0xFF


cdef inline void wr_u32(unsigned char* p, unsigned long v):
    cdef int i
    for i in range(4):
        p[i] = (v >> (8 * i)) & 0xFF


cdef inline void wr_u64(unsigned char* p, unsigned long long v):
    cdef int i
    for i in range(8):
        p[i] = (v >> (8 * i)) & 0xFF


def parse(const unsigned char[::1] buf):
    """Parse header + metadata; returns (etype_code, count, metadata, payload_offset)."""
    cdef Py_ssize_t buflen = buf.shape[0]
    if buflen < HEADER_SIZE:
        raise errors.TruncatedBuffer(
            f"buffer of {buflen} bytes is shorter than the {HEADER_SIZE}-byte header")
    cdef const unsigned char* p = &buf[0]
    if p[0] != MAGIC[0] or p[1] != MAGIC[1] or p[2] != MAGIC[2] or p[3] != MAGIC[3]:
        raise errors.BadMagic(f"bad magic {bytes(buf[:4])!r}")
    if p[4] != 1:
        raise errors.UnsupportedVersion(f"unsupported format version {p[4]}")
    cdef unsigned int etype = p[5]
    if etype >= 10:
        raise errors.BadElementType(f"invalid element type code {etype}")
    cdef unsigned long long count = rd_u64(p + 8)
    cdef unsigned long mlen = rd_u32(p + 16)
    cdef unsigned long payload_offset = rd_u32(p + 20)
    if HEADER_SIZE + <unsigned long long> mlen > <unsigned long long> buflen:
        raise errors.TruncatedBuffer(
            f"metadata section of {mlen} bytes exceeds buffer of {buflen}")
    if payload_offset < HEADER_SIZE + mlen:
        raise errors.MalformedMetadata(
            f"payload offset {payload_offset} overlaps metadata ending at {HEADER_SIZE + mlen}")
    if payload_offset % PAYLOAD_ALIGN:
        raise errors.MalformedMetadata(
            f"payload offset {payload_offset} is not {PAYLOAD_ALIGN}-byte aligned")
    if payload_offset + count * WIDTHS[etype] > <unsigned long long> buflen:
        raise errors.TruncatedBuffer(
            f"declared envelope of {payload_offset + count * WIDTHS[etype]} bytes "
            f"exceeds buffer of {buflen}")

    # metadata section
    if mlen < 2:
        raise errors.MalformedMetadata("metadata section shorter than its entry count field")
    cdef const unsigned char* m = p + HEADER_SIZE
    cdef unsigned long end = mlen
    cdef unsigned int entries = rd_u16(m)
    cdef unsigned long pos = 2
    cdef unsigned int klen
    cdef unsigned long vlen
    cdef unsigned int i
    meta = {}
    for i in range(entries):
        if pos + 2 > end:
            raise errors.MalformedMetadata("truncated metadata key length")
        klen = rd_u16(m + pos)
        pos += 2
        if pos + klen + 4 > end:
            raise errors.MalformedMetadata("truncated metadata key or value length")
        try:
            key = PyUnicode_DecodeASCII(<const char*> (m + pos), klen, NULL)
        except UnicodeDecodeError:
            raise errors.MalformedMetadata("metadata key is not ASCII") from None
        pos += klen
        vlen = rd_u32(m + pos)
        pos += 4
        if pos + vlen > end:
            raise errors.MalformedMetadata("truncated metadata value")
        try:
            value = PyUnicode_DecodeUTF8(<const char*> (m + pos), vlen, NULL)
        except UnicodeDecodeError:
            raise errors.MalformedMetadata("metadata value is not UTF-8") from None
        pos += vlen
        if key in meta:
            raise errors.MalformedMetadata(f"duplicate metadata key {key!r}")
        meta[key] = value
    if pos != end:
        raise errors.MalformedMetadata(f"{end - pos} trailing bytes in metadata section")
    return etype, count, meta, payload_offset


def pack_prefix(unsigned char[::1] out, unsigned int etype,
                unsigned long long count, list pairs,
                unsigned long mlen, unsigned long payload_offset):
    """Write header, metadata section, and padding (everything but payload)."""
    cdef unsigned char* p = &out[0]
    p[0] = MAGIC[0]; p[1] = MAGIC[1]; p[2] = MAGIC[2]; p[3] = MAGIC[3]
    p[4] = 1
    p[5] = etype & 0xFF
    p[6] = 0; p[7] = 0
    wr_u64(p + 8, count)
    wr_u32(p + 16, mlen)
    wr_u32(p + 20, payload_offset)

    cdef unsigned long pos = HEADER_SIZE
    wr_u16(p + pos, len(pairs))
    pos += 2
    cdef bytes kb, vb
    cdef Py_ssize_t n
    for kb, vb in pairs:
        n = len(kb)
        wr_u16(p + pos, n)
        pos += 2
        memcpy(p + pos, <const char*> kb, n)
        pos += n
        n = len(vb)
        wr_u32(p + pos, n)
        pos += 4
        memcpy(p + pos, <const char*> vb, n)
        pos += n
    if payload_offset > pos:
        memset(p + pos, 0, payload_offset - pos)
