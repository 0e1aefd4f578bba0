"""Hybrid epoch-anchored monotonic clock.

Message timestamps must be (a) monotone within one process and (b)
comparable across processes on the same host, so latency can be computed
as recv - send. A raw wall clock can step backwards; a raw monotonic
clock has an arbitrary epoch that CPython does not guarantee to share
across processes. The hybrid clock anchors CLOCK_MONOTONIC_RAW-style
progression to the wall-clock epoch sampled once at import.

On Linux, time.monotonic_ns() is CLOCK_MONOTONIC which *is* shared
across processes (it counts from boot), so cross-process deltas are
exact even if the wall anchors differ slightly; the anchor only makes
the values human-readable.
"""

import time

_ANCHOR_EPOCH_NS = time.time_ns()
_ANCHOR_MONO_NS = time.monotonic_ns()


def hybrid_now_ns() -> int:
    """Nanoseconds since the Unix epoch, advancing monotonically."""
    return _ANCHOR_EPOCH_NS + (time.monotonic_ns() - _ANCHOR_MONO_NS)


def mono_now_ns() -> int:
    """Raw monotonic nanoseconds (scheduling deadlines)."""
    return time.monotonic_ns()
