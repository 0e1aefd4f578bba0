"""Pool behaviour, including exact equivalence with a brute-force reference
allocator replaying randomized traces."""

import random

import pytest

from miniflow import errors
from miniflow.shm import FakeShmBackend, Pool, PoolConfig, attach
from miniflow.shm.os_backend import OsShmBackend


def make_pool(cap=256 * 1024 * 1024):
    backend = FakeShmBackend()
    return Pool(PoolConfig(max_free_bytes=cap, name_prefix="miniflow-t", backend=backend)), backend


class ReferenceAllocator:
    """Plain-list, linear-scan replay of the pool rules (the test oracle)."""

    def __init__(self, max_free_bytes):
        self.max_free_bytes = max_free_bytes
        self.free = []  # (block_id, capacity, freed_seq)
        self.in_use = {}  # block_id -> [capacity, refcount]
        self.capacity = {}  # block_id -> capacity (live blocks)
        self.next_id = 1
        self.freed_seq = 0
        self.created = 0
        self.evicted = 0

    def acquire(self, size, receivers):
        best = None
        for entry in self.free:
            _, cap, seq = entry
            if cap < size:
                continue
            if best is None or (cap, seq) < (best[1], best[2]):
                best = entry
        if best is not None:
            self.free.remove(best)
            block_id = best[0]
        else:
            block_id = self.next_id
            self.next_id += 1
            self.capacity[block_id] = size
            self.created += 1
        self.in_use[block_id] = [self.capacity[block_id], receivers]
        return block_id

    def release(self, block_id):
        entry = self.in_use[block_id]
        entry[1] -= 1
        if entry[1] > 0:
            return []
        del self.in_use[block_id]
        self.freed_seq += 1
        self.free.append((block_id, self.capacity[block_id], self.freed_seq))
        evicted = []
        while sum(cap for _, cap, _ in self.free) > self.max_free_bytes and self.free:
            oldest = min(self.free, key=lambda e: e[2])
            self.free.remove(oldest)
            del self.capacity[oldest[0]]
            self.evicted += 1
            evicted.append(oldest[0])
        return evicted

    def free_bytes(self):
        return sum(cap for _, cap, _ in self.free)


def test_acquire_empty_pool_creates_exact_size():
    pool, backend = make_pool()
    lease = pool.acquire(1024, 1)
    assert lease.block.capacity == 1024
    assert len(lease.buf) == 1024
    assert backend.create_calls == 1
    s = pool.stats()
    assert (s.in_use_blocks, s.created_total, s.free_blocks) == (1, 1, 0)


def test_acquire_smallest_fit():
    pool, _ = make_pool()
    a = pool.acquire(4096, 1)
    b = pool.acquire(2048, 1)
    pool.release(a.block.id)  # freed_seq 1
    pool.release(b.block.id)  # freed_seq 2
    lease = pool.acquire(1500, 2)
    assert lease.block.id == b.block.id
    assert lease.block.capacity == 2048
    assert len(lease.buf) == 1500


def test_acquire_tie_breaks_to_oldest():
    pool, _ = make_pool()
    a = pool.acquire(2048, 1)
    b = pool.acquire(2048, 1)
    # free b first, then a: b has the older freed_seq
    pool.release(b.block.id)
    pool.release(a.block.id)
    lease = pool.acquire(2000, 1)
    assert lease.block.id == b.block.id


def test_release_refcounting():
    pool, _ = make_pool()
    lease = pool.acquire(100, 3)
    out = pool.release(lease.block.id)
    assert (out.kind, out.refcount) == ("still_referenced", 2)
    out = pool.release(lease.block.id)
    assert (out.kind, out.refcount) == ("still_referenced", 1)
    out = pool.release(lease.block.id)
    assert out.kind == "reclaimed"
    assert pool.stats().free_blocks == 1


def test_eviction_oldest_first():
    # free queue {4096 old}, release of an in-use 1024 block: the freed 1024
    # pushes free bytes to 5120 > cap, so the oldest (4096) block is destroyed
    pool2, backend2 = make_pool(cap=4096)
    big = pool2.acquire(4096, 1)
    small2 = pool2.acquire(1024, 1)
    pool2.release(big.block.id)
    out = pool2.release(small2.block.id)
    assert out.kind == "reclaimed_and_evicted"
    assert out.evicted == (big.block.id,)
    s = pool2.stats()
    assert s.evicted_total == 1
    assert s.free_bytes == 1024
    assert backend2.unlink_calls == 1


def test_errors():
    pool, backend = make_pool()
    with pytest.raises(errors.UnknownBlock):
        pool.release(99)
    lease = pool.acquire(10, 1)
    pool.release(lease.block.id)
    with pytest.raises(errors.NotInUse):
        pool.release(lease.block.id)
    backend.fail_next_create = True
    with pytest.raises(errors.OsAllocationFailed):
        pool.acquire(1 << 30, 1)
    with pytest.raises(ValueError):
        pool.acquire(0, 1)
    with pytest.raises(ValueError):
        pool.acquire(10, 0)


def test_steady_state_reuse_creates_one_block():
    pool, backend = make_pool()
    for i in range(1000):
        lease = pool.acquire(4096, 1)
        lease.buf[:4] = i.to_bytes(4, "little")
        pool.release(lease.block.id)
    assert pool.stats().created_total == 1
    assert backend.create_calls == 1


def test_stats_fresh_pool():
    pool, _ = make_pool()
    s = pool.stats()
    assert (s.free_blocks, s.free_bytes, s.in_use_blocks, s.in_use_bytes, s.created_total, s.evicted_total) == (
        0, 0, 0, 0, 0, 0)


def test_lease_exposes_exactly_requested_bytes():
    pool, _ = make_pool()
    lease = pool.acquire(4096, 1)
    pool.release(lease.block.id)
    lease = pool.acquire(100, 1)
    assert lease.block.capacity == 4096
    assert len(lease.buf) == 100


def run_trace(seed, ops, cap, max_outstanding=48):
    """Apply one randomized trace to the pool and the oracle in lock-step."""
    rng = random.Random(seed)
    pool, backend = make_pool(cap=cap)
    ref = ReferenceAllocator(cap)
    outstanding = []  # block ids with refcounts remaining (mirrored)
    for step in range(ops):
        do_acquire = rng.random() < 0.55 and len(outstanding) < max_outstanding
        if not outstanding:
            do_acquire = True
        if do_acquire:
            size = rng.choice(
                (rng.randrange(1, 4097), rng.randrange(1, 1 << 23) | 1, rng.choice((4096, 65536, 1 << 20)))
            )
            receivers = rng.randrange(1, 4)
            lease = pool.acquire(size, receivers)
            ref_id = ref.acquire(size, receivers)
            assert lease.block.id == ref_id, f"step {step}: chose block {lease.block.id}, oracle {ref_id}"
            for _ in range(receivers):
                outstanding.append(lease.block.id)
        else:
            block_id = outstanding.pop(rng.randrange(len(outstanding)))
            out = pool.release(block_id)
            ref_evicted = ref.release(block_id)
            assert list(out.evicted) == ref_evicted, f"step {step}: eviction mismatch"
        s = pool.stats()
        assert s.free_bytes <= cap, f"step {step}: cap violated"
        assert s.free_bytes == ref.free_bytes()
        assert s.created_total == ref.created
        assert s.evicted_total == ref.evicted
    return pool, ref


def test_oracle_equivalence_long_trace():
    run_trace(seed=7, ops=10_000, cap=64 * 1024 * 1024)


def test_oracle_equivalence_small_cap():
    # small cap forces constant eviction churn
    run_trace(seed=8, ops=3_000, cap=1 << 20)


def test_no_block_simultaneously_leased_and_free():
    pool, _ = make_pool(cap=1 << 16)
    rng = random.Random(3)
    live = {}
    for _ in range(2000):
        if live and rng.random() < 0.5:
            block_id = rng.choice(list(live))
            live[block_id] -= 1
            if live[block_id] == 0:
                del live[block_id]
            pool.release(block_id)
        else:
            receivers = rng.randrange(1, 3)
            lease = pool.acquire(rng.randrange(1, 8192), receivers)
            # an acquired block was either new or fully released, never live
            assert lease.block.id not in live
            live[lease.block.id] = receivers
        with pool._lock:
            leased = set(pool._in_use)
            free = set(pool._free_order)
        assert not (leased & free)


def test_real_backend_write_then_attach(tmp_path, monkeypatch):
    monkeypatch.setenv("MINIFLOW_SHM_DIR", str(tmp_path))
    pool = Pool(PoolConfig(max_free_bytes=1 << 20, name_prefix="miniflow-rt", backend=OsShmBackend()))
    lease = pool.acquire(512, 1)
    lease.buf[:5] = b"hello"
    view = attach(lease.block.os_name, 512)
    assert bytes(view.buf[:5]) == b"hello"
    view2 = attach(lease.block.os_name, 512)
    assert bytes(view2.buf[:5]) == bytes(view.buf[:5])
    with pytest.raises(errors.NoSuchObject):
        attach("miniflow-rt-nope", 10)
    with pytest.raises(errors.SizeMismatch):
        attach(lease.block.os_name, 4096)
    assert view.buf.readonly
    view.close()
    view2.close()
    pool.release(lease.block.id)
    pool.close()
    assert list(tmp_path.iterdir()) == []
