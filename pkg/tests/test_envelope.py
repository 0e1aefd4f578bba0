"""Envelope format: layout arithmetic, bit-exact encoding, zero-copy decode."""

import random
import struct

import pytest

from miniflow import errors
from miniflow.envelope import format as fmt
from miniflow.envelope import (
    ElementType,
    compute_layout,
    decode,
    encode,
    encode_into,
    validate,
)


from instrumentation import CountingByteSource, CountingRegion


def test_layout_empty_metadata_zero_payload():
    lay = compute_layout(ElementType.U8, 0, {})
    assert (lay.metadata_len, lay.payload_offset, lay.total_size) == (2, 64, 64)


def test_layout_4mb_payload():
    lay = compute_layout(ElementType.U8, 4 * 1024 * 1024, {})
    assert lay.total_size == 64 + 4 * 1024 * 1024


def test_layout_f64_with_metadata():
    # metadata section by hand: entry count (2) + key len (2) + "output_id" (9)
    # + value len (4) + "data" (4) = 21 bytes; 24+21=45 rounds up to 64.
    lay = compute_layout(ElementType.F64, 3, {"output_id": "data"})
    assert (lay.metadata_len, lay.payload_offset, lay.total_size) == (21, 64, 88)


def test_golden_bytes():
    buf = encode(ElementType.F64, 3, {"output_id": "data"}, bytes(range(24)))
    expected_header = struct.pack("<4sBBHQII", b"DORA", 1, 9, 0, 3, 21, 64)
    expected_meta = struct.pack("<H", 1) + struct.pack("<H", 9) + b"output_id" + struct.pack("<I", 4) + b"data"
    assert buf[:24] == expected_header
    assert buf[24:45] == expected_meta
    assert buf[45:64] == bytes(19)
    assert buf[64:] == bytes(range(24))


def test_element_widths():
    widths = {
        ElementType.U8: 1, ElementType.I8: 1, ElementType.U16: 2, ElementType.I16: 2,
        ElementType.U32: 4, ElementType.I32: 4, ElementType.U64: 8, ElementType.I64: 8,
        ElementType.F32: 4, ElementType.F64: 8,
    }
    for etype, width in widths.items():
        assert etype.width == width
    with pytest.raises(ValueError):
        ElementType(10)


def _random_case(rng):
    etype = ElementType(rng.randrange(10))
    count = rng.choice([0, 1, 2, 3, 7, rng.randrange(1, 1000), rng.randrange(1, 1 << 20)])
    meta = {}
    for _ in range(rng.randrange(0, 5)):
        key = "".join(rng.choice("abcdefghijklmnop_") for _ in range(rng.randrange(1, 12)))
        meta[key] = "".join(rng.choice("abcXYZ π€ 0123") for _ in range(rng.randrange(0, 20)))
    payload = rng.randbytes(count * etype.width)
    return etype, count, meta, payload


def test_round_trip_property():
    rng = random.Random(0xD0_5A)
    for _ in range(300):
        etype, count, meta, payload = _random_case(rng)
        buf = encode(etype, count, meta, payload)
        env = decode(buf)
        assert env.element_type == etype
        assert env.element_count == count
        assert env.metadata == meta
        assert bytes(env.payload) == payload
        assert env.payload_offset % 64 == 0
        # re-encoding the decoded fields is bit-identical
        again = encode(env.element_type, env.element_count, env.metadata, bytes(env.payload))
        assert again == buf
        assert validate(buf) == []


def test_encode_deterministic():
    a = bytearray(256)
    b = bytearray(256)
    n1 = encode_into(a, ElementType.U32, 8, {"k": "v"}, bytes(32))
    n2 = encode_into(b, ElementType.U32, 8, {"k": "v"}, bytes(32))
    assert n1 == n2
    assert a == b


def test_encode_single_payload_pass():
    src = CountingByteSource(bytes(32 * 1024 * 1024))
    buf = bytearray(64 + len(src.data))
    encode_into(buf, ElementType.U8, len(src.data), {}, src)
    assert src.copies == 1


def test_decode_zero_payload_reads():
    for size in (0, 1024, 4 * 1024 * 1024, 32 * 1024 * 1024):
        buf = encode(ElementType.U8, size, {"ts_send_ns": "12345", "seq": "7"}, bytes(size))
        region = CountingRegion(buf)
        env = decode(region)
        assert env.element_count == size
        assert sum(s for _, s in region.reads) < 4096
        assert region.bytes_read_in(env.payload_offset, env.total_size) == 0


def test_decode_payload_aliases_buffer():
    buf = bytearray(encode(ElementType.U8, 4, {}, b"abcd"))
    env = decode(buf)
    assert bytes(env.payload) == b"abcd"
    buf[env.payload_offset] = ord("z")
    assert bytes(env.payload) == b"zbcd"


def test_decode_tolerates_trailing_slack():
    buf = encode(ElementType.U16, 3, {}, b"\x01\x02\x03\x04\x05\x06") + bytes(100)
    env = decode(buf)
    assert env.element_count == 3
    assert bytes(env.payload) == b"\x01\x02\x03\x04\x05\x06"


def test_errors():
    with pytest.raises(errors.BadMagic):
        decode(b"AAAA" + bytes(60))
    with pytest.raises(errors.TruncatedBuffer):
        decode(b"DORA")
    bad_version = bytearray(encode(ElementType.U8, 0, {}, b""))
    bad_version[4] = 2
    with pytest.raises(errors.UnsupportedVersion):
        decode(bytes(bad_version))
    bad_etype = bytearray(encode(ElementType.U8, 0, {}, b""))
    bad_etype[5] = 10
    with pytest.raises(errors.BadElementType):
        decode(bytes(bad_etype))
    truncated = encode(ElementType.U64, 10, {}, bytes(80))[:-10]
    with pytest.raises(errors.TruncatedBuffer):
        decode(truncated)
    with pytest.raises(errors.DuplicateKey):
        compute_layout(ElementType.U8, 0, [("k", "a"), ("k", "b")])
    with pytest.raises(errors.MalformedMetadata):
        compute_layout(ElementType.U8, 0, {"kλ": "v"})
    with pytest.raises(errors.MetadataTooLarge):
        compute_layout(ElementType.U8, 0, {"k" * 70000: "v"})
    with pytest.raises(errors.BufferTooSmall):
        encode_into(bytearray(10), ElementType.U8, 0, {}, b"")
    with pytest.raises(ValueError):
        encode_into(bytearray(128), ElementType.U32, 2, {}, b"123")  # wrong payload length


def test_validate_reports_all_violations():
    assert validate(encode(ElementType.F32, 2, {"a": "b"}, bytes(8))) == []
    buf = bytearray(encode(ElementType.U8, 8, {}, bytes(8)))
    buf[4] = 2
    assert [v.code for v in validate(bytes(buf))] == ["unsupported_version"]
    buf = bytearray(encode(ElementType.U8, 0, {}, b""))
    struct.pack_into("<I", buf, 20, 63)  # misaligned payload offset
    assert "misaligned_payload" in [v.code for v in validate(bytes(buf))]
    buf = bytearray(encode(ElementType.U8, 0, {}, b""))
    buf[4] = 3
    buf[5] = 77
    codes = [v.code for v in validate(bytes(buf))]
    assert "unsupported_version" in codes and "bad_element_type" in codes
    assert validate(b"DO") == [fmt.Violation("truncated", "buffer of 2 bytes is shorter than the header")]


def test_metadata_reserved_keys_round_trip():
    meta = {"ts_send_ns": "171717", "seq": "42", "output_id": "data", "node_id": "camera"}
    env = decode(encode(ElementType.U8, 0, meta, b""))
    assert env.metadata == meta
