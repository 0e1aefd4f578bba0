"""Microbenchmark: compiled envelope codec vs the pure-Python fallback.

Times the per-message kernels (header+metadata pack and parse) that sit on
the latency path of every delivery. Payload movement is excluded on the
decode side by construction (decode never touches payload bytes) and is the
same memcpy for both codecs on the encode side.
"""

from __future__ import annotations

import csv
import time

from ..envelope import ElementType, format as fmt

BENCH_METADATA = {
    "ts_send_ns": "1723200000000000000",
    "seq": "123456",
    "output_id": "image",
    "node_id": "camera",
}


def _codecs() -> list[str]:
    return ["pure", "compiled"] if fmt.ACTIVE_CODEC == "compiled" else ["pure"]


def _with_codec(name: str):
    if name == "compiled":
        return fmt._codec.parse, fmt._codec.pack_prefix
    return None, None


def _time_ops(fn, min_time_s=0.2) -> float:
    """Calls per second of fn, measured over at least min_time_s."""
    fn()  # warm
    n = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(n):
            fn()
        elapsed = time.perf_counter() - t0
        if elapsed >= min_time_s:
            return n / elapsed
        n = max(n * 2, int(n * min_time_s / max(elapsed, 1e-9)) + 1)


def run(payload_sizes=(0, 1024, 65536, 1 << 20), out_csv=None) -> list[dict]:
    rows = []
    saved = (fmt._parse, fmt._pack_prefix)
    try:
        for size in payload_sizes:
            payload = b"\x7e" * size
            encoded = fmt.encode(ElementType.U8, size, BENCH_METADATA, payload)
            buf = bytearray(len(encoded))
            for codec in _codecs():
                fmt._parse, fmt._pack_prefix = _with_codec(codec)
                rows.append(
                    {
                        "operation": "decode",
                        "payload_bytes": size,
                        "codec": codec,
                        "ops_per_s": round(_time_ops(lambda: fmt.decode(encoded))),
                    }
                )
                rows.append(
                    {
                        "operation": "encode",
                        "payload_bytes": size,
                        "codec": codec,
                        "ops_per_s": round(
                            _time_ops(
                                lambda: fmt.encode_into(buf, ElementType.U8, size, BENCH_METADATA, payload)
                            )
                        ),
                    }
                )
    finally:
        fmt._parse, fmt._pack_prefix = saved
    if out_csv:
        with open(out_csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["operation", "payload_bytes", "codec", "ops_per_s"])
            writer.writeheader()
            writer.writerows(rows)
    return rows
