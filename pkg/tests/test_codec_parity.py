"""Compiled codec vs pure-Python codec: identical bytes, identical errors."""

import random

import pytest

from miniflow import errors
from miniflow.envelope import format as fmt


requires_compiled = pytest.mark.skipif(
    fmt.ACTIVE_CODEC != "compiled", reason="compiled codec not built"
)


@pytest.fixture
def pure(monkeypatch):
    monkeypatch.setattr(fmt, "_parse", None)
    monkeypatch.setattr(fmt, "_pack_prefix", None)


def _cases(n, seed):
    rng = random.Random(seed)
    for _ in range(n):
        etype = fmt.ElementType(rng.randrange(10))
        count = rng.choice([0, 1, rng.randrange(0, 4096)])
        meta = {
            "".join(rng.choice("abcdef") for _ in range(rng.randrange(1, 8))): "v" * rng.randrange(0, 30)
            for _ in range(rng.randrange(0, 6))
        }
        yield etype, count, meta, rng.randbytes(count * etype.width)


@requires_compiled
def test_encode_parity(pure):
    compiled_bufs = []
    cases = list(_cases(200, seed=11))
    fmt._pack_prefix = fmt._codec.pack_prefix
    for etype, count, meta, payload in cases:
        compiled_bufs.append(fmt.encode(etype, count, meta, payload))
    fmt._pack_prefix = None
    for buf, (etype, count, meta, payload) in zip(compiled_bufs, cases):
        assert fmt.encode(etype, count, meta, payload) == buf


@requires_compiled
def test_decode_parity(pure):
    for etype, count, meta, payload in _cases(200, seed=12):
        buf = fmt.encode(etype, count, meta, payload)
        pure_env = fmt.decode(buf)
        fmt._parse = fmt._codec.parse
        fast_env = fmt.decode(buf)
        fmt._parse = None
        assert fast_env == pure_env
        assert fast_env.payload_offset == pure_env.payload_offset


@requires_compiled
def test_error_parity(pure):
    bad = [
        b"",
        b"DOR",
        b"AAAA" + bytes(60),
        bytes(24),
        fmt.encode(fmt.ElementType.U64, 4, {}, bytes(32))[:40],
    ]
    # corrupt metadata length
    buf = bytearray(fmt.encode(fmt.ElementType.U8, 0, {"k": "v"}, b""))
    buf[16] = 0xFF
    bad.append(bytes(buf))
    for buf in bad:
        pure_exc = fast_exc = None
        try:
            fmt.decode(buf)
        except errors.EnvelopeError as exc:
            pure_exc = type(exc)
        fmt._parse = fmt._codec.parse
        try:
            fmt.decode(buf)
        except errors.EnvelopeError as exc:
            fast_exc = type(exc)
        fmt._parse = None
        assert fast_exc == pure_exc, f"mismatch for {buf[:16]!r}"


@requires_compiled
def test_decode_fuzz_parity():
    rng = random.Random(13)
    parse_fast = fmt._codec.parse
    for _ in range(2000):
        if rng.random() < 0.5:
            buf = rng.randbytes(rng.randrange(0, 128))
        else:
            mutated = bytearray(fmt.encode(fmt.ElementType.U8, 8, {"a": "b"}, bytes(8)))
            for _ in range(rng.randrange(1, 6)):
                mutated[rng.randrange(len(mutated))] = rng.randrange(256)
            buf = bytes(mutated)
        pure_result = fast_result = None
        pure_exc = fast_exc = None
        try:
            # regions always take the pure path
            pure_result = fmt.decode(fmt.BufferRegion(buf))
        except errors.EnvelopeError as exc:
            pure_exc = type(exc)
        try:
            fast_result = parse_fast(memoryview(buf))
        except errors.EnvelopeError as exc:
            fast_exc = type(exc)
        if pure_result is not None:
            assert fast_result == (
                int(pure_result.element_type),
                pure_result.element_count,
                pure_result.metadata,
                pure_result.payload_offset,
            )
        else:
            assert fast_exc == pure_exc
