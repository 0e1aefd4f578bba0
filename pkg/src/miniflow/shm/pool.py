"""On-demand shared-memory pool.

Robotic edges carry messages of stable size (a camera publishes frames of one
resolution), so a freed block is very likely to fit the next message exactly.
The pool exploits that: freed blocks wait in a queue ordered by when they were
freed; an acquisition takes the *smallest* free block that fits (ties go to
the oldest) and only creates a new block — sized exactly to the request —
when nothing fits. Blocks are returned when every receiver has dropped its
reference, and the free queue is capped: when its byte total exceeds the
configured maximum, the oldest free blocks are destroyed first.

In-use blocks are never destroyed and do not count against the cap; evicting
a mapped block under a reader would be unsafe.
"""

from __future__ import annotations

import bisect
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

from .. import errors
from .os_backend import OsShmBackend

DEFAULT_MAX_FREE_BYTES = 256 * 1024 * 1024


@dataclass(frozen=True)
class Block:
    id: int
    os_name: str
    capacity: int
    created_seq: int


@dataclass(frozen=True)
class Lease:
    """A block held for writing; ``buf`` exposes exactly the requested bytes."""

    block: Block
    buf: memoryview


@dataclass(frozen=True)
class ReclaimOutcome:
    kind: str  # "still_referenced" | "reclaimed" | "reclaimed_and_evicted"
    refcount: int
    evicted: tuple[int, ...] = ()

    @property
    def reclaimed(self) -> bool:
        return self.kind != "still_referenced"


@dataclass(frozen=True)
class PoolStats:
    free_blocks: int
    free_bytes: int
    in_use_blocks: int
    in_use_bytes: int
    created_total: int
    evicted_total: int


@dataclass
class PoolConfig:
    max_free_bytes: int = DEFAULT_MAX_FREE_BYTES
    name_prefix: str = "miniflow-0"
    backend: object = field(default_factory=OsShmBackend)


class Pool:
    """Thread-safe block pool; acquire/release are linearizable."""

    def __init__(self, config: PoolConfig | None = None):
        self.config = config or PoolConfig()
        if self.config.max_free_bytes < 0:
            raise ValueError("max_free_bytes must be >= 0")
        self._lock = threading.Lock()
        self._segments = {}          # block id -> ShmSegment
        self._blocks = {}            # block id -> Block (live, free or in use)
        self._in_use = {}            # block id -> refcount
        self._free_order = OrderedDict()   # block id -> freed_seq, oldest first
        self._free_sorted = []       # (capacity, freed_seq, block id), ascending
        self._free_bytes = 0
        self._next_block_id = 1
        self._created_seq = 0
        self._freed_seq = 0
        self._created_total = 0
        self._evicted_total = 0

    # -- public operations ----------------------------------------------------

    def acquire(self, size: int, receiver_count: int) -> Lease:
        """Smallest free block with capacity >= size, else a new exact-size block."""
        if size <= 0:
            raise ValueError("size must be positive")
        if receiver_count < 1:
            raise ValueError("receiver_count must be >= 1")
        with self._lock:
            idx = bisect.bisect_left(self._free_sorted, (size, 0, 0))
            if idx < len(self._free_sorted):
                _, freed_seq, block_id = self._free_sorted.pop(idx)
                del self._free_order[block_id]
                block = self._blocks[block_id]
                self._free_bytes -= block.capacity
            else:
                block = self._create_block(size)
            self._in_use[block.id] = receiver_count
            return Lease(block, self._segments[block.id].buf[0:size])

    def release(self, block_id: int) -> ReclaimOutcome:
        """Drop one reference; on the last one, requeue and enforce the cap."""
        with self._lock:
            if block_id not in self._blocks:
                raise errors.UnknownBlock(f"block {block_id} does not exist")
            refcount = self._in_use.get(block_id)
            if refcount is None:
                raise errors.NotInUse(f"block {block_id} is not in use")
            refcount -= 1
            if refcount > 0:
                self._in_use[block_id] = refcount
                return ReclaimOutcome("still_referenced", refcount)
            del self._in_use[block_id]
            block = self._blocks[block_id]
            self._freed_seq += 1
            self._free_order[block_id] = self._freed_seq
            bisect.insort(self._free_sorted, (block.capacity, self._freed_seq, block_id))
            self._free_bytes += block.capacity
            evicted = self._evict_over_cap()
            if evicted:
                return ReclaimOutcome("reclaimed_and_evicted", 0, tuple(evicted))
            return ReclaimOutcome("reclaimed", 0)

    def stats(self) -> PoolStats:
        with self._lock:
            in_use_bytes = sum(self._blocks[b].capacity for b in self._in_use)
            return PoolStats(
                free_blocks=len(self._free_order),
                free_bytes=self._free_bytes,
                in_use_blocks=len(self._in_use),
                in_use_bytes=in_use_bytes,
                created_total=self._created_total,
                evicted_total=self._evicted_total,
            )

    def block(self, block_id: int) -> Block:
        with self._lock:
            try:
                return self._blocks[block_id]
            except KeyError:
                raise errors.UnknownBlock(f"block {block_id} does not exist") from None

    def buffer_of(self, block_id: int) -> memoryview:
        with self._lock:
            if block_id not in self._blocks:
                raise errors.UnknownBlock(f"block {block_id} does not exist")
            return self._segments[block_id].buf

    def close(self):
        """Destroy every block (daemon shutdown). In-use leases become invalid."""
        with self._lock:
            for block_id, seg in list(self._segments.items()):
                seg.close()
                self.config.backend.unlink(self._blocks[block_id].os_name)
            self._segments.clear()
            self._blocks.clear()
            self._in_use.clear()
            self._free_order.clear()
            self._free_sorted.clear()
            self._free_bytes = 0

    # -- internals --------------------------------------------------------------

    def _create_block(self, size: int) -> Block:
        block_id = self._next_block_id
        self._next_block_id += 1
        self._created_seq += 1
        os_name = f"{self.config.name_prefix}-{block_id}"
        segment = self.config.backend.create(os_name, size)
        block = Block(block_id, os_name, size, self._created_seq)
        self._segments[block_id] = segment
        self._blocks[block_id] = block
        self._created_total += 1
        return block

    def _evict_over_cap(self) -> list[int]:
        evicted = []
        while self._free_bytes > self.config.max_free_bytes and self._free_order:
            block_id, freed_seq = next(iter(self._free_order.items()))
            del self._free_order[block_id]
            block = self._blocks.pop(block_id)
            idx = bisect.bisect_left(self._free_sorted, (block.capacity, freed_seq, block_id))
            assert self._free_sorted[idx] == (block.capacity, freed_seq, block_id)
            self._free_sorted.pop(idx)
            self._free_bytes -= block.capacity
            self._segments.pop(block_id).close()
            self.config.backend.unlink(block.os_name)
            self._evicted_total += 1
            evicted.append(block_id)
        return evicted
