"""Shared-memory transport: OS segment backends and the block pool."""

from .os_backend import FakeShmBackend, OsShmBackend, ShmSegment, attach, shm_dir
from .pool import (
    DEFAULT_MAX_FREE_BYTES,
    Block,
    Lease,
    Pool,
    PoolConfig,
    PoolStats,
    ReclaimOutcome,
)

__all__ = [
    "DEFAULT_MAX_FREE_BYTES",
    "Block",
    "FakeShmBackend",
    "Lease",
    "OsShmBackend",
    "Pool",
    "PoolConfig",
    "PoolStats",
    "ReclaimOutcome",
    "ShmSegment",
    "attach",
    "shm_dir",
]
