"""OS shared-memory objects.

On Linux a POSIX shared-memory object is a file in /dev/shm; creating,
mapping, and unlinking regular files there gives the same physical-page
sharing semantics as shm_open without fighting Python's resource tracker.
When /dev/shm is unavailable the temp directory is used — a file-backed
mmap still shares pages between processes through the page cache.

MINIFLOW_SHM_DIR overrides the directory (the daemon passes it to spawned
nodes so both sides resolve names identically).
"""

from __future__ import annotations

import mmap
import os
import tempfile
import threading

from .. import errors

_NAME_OK = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-_.")


def shm_dir() -> str:
    env = os.environ.get("MINIFLOW_SHM_DIR")
    if env:
        return env
    if os.path.isdir("/dev/shm") and os.access("/dev/shm", os.W_OK):
        return "/dev/shm"
    return tempfile.gettempdir()


def _path_for(name: str) -> str:
    if not name or not set(name) <= _NAME_OK:
        raise ValueError(f"invalid shared-memory object name {name!r}")
    return os.path.join(shm_dir(), name)


class ShmSegment:
    """A mapped shared-memory object.

    ``buf`` is a memoryview over the whole mapping. close() releases the view
    and, if no exported sub-views remain, the mapping itself; with live
    sub-views the mapping is freed once they are garbage collected.
    """

    def __init__(self, name: str, size: int, mm: mmap.mmap, writable: bool):
        self.name = name
        self.size = size
        self.writable = writable
        self._mmap = mm
        self._view = memoryview(mm)
        self._closed = False

    @property
    def buf(self) -> memoryview:
        return self._view

    def close(self):
        if self._closed:
            return
        self._closed = True
        self._view.release()
        try:
            self._mmap.close()
        except BufferError:
            pass  # sub-views still alive; the mapping dies with them

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class OsShmBackend:
    """Factory for real OS shared-memory segments."""

    def create(self, name: str, size: int) -> ShmSegment:
        if size <= 0:
            raise ValueError("size must be positive")
        path = _path_for(name)
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_RDWR, 0o600)
        except OSError as exc:
            raise errors.OsAllocationFailed(f"cannot create {path}: {exc}") from None
        try:
            os.ftruncate(fd, size)
            mm = mmap.mmap(fd, size, prot=mmap.PROT_READ | mmap.PROT_WRITE)
        except OSError as exc:
            os.close(fd)
            os.unlink(path)
            raise errors.OsAllocationFailed(f"cannot map {path}: {exc}") from None
        os.close(fd)
        return ShmSegment(name, size, mm, writable=True)

    def attach(self, name: str, size: int, writable: bool = False) -> ShmSegment:
        path = _path_for(name)
        flags = os.O_RDWR if writable else os.O_RDONLY
        try:
            fd = os.open(path, flags)
        except FileNotFoundError:
            raise errors.NoSuchObject(f"no shared-memory object named {name!r}") from None
        except OSError as exc:
            raise errors.OsAllocationFailed(f"cannot open {path}: {exc}") from None
        try:
            actual = os.fstat(fd).st_size
            if actual < size:
                raise errors.SizeMismatch(f"object {name!r} has {actual} bytes, {size} requested")
            prot = mmap.PROT_READ | (mmap.PROT_WRITE if writable else 0)
            mm = mmap.mmap(fd, actual, prot=prot)
        except errors.SizeMismatch:
            os.close(fd)
            raise
        except OSError as exc:
            os.close(fd)
            raise errors.OsAllocationFailed(f"cannot map {path}: {exc}") from None
        os.close(fd)
        return ShmSegment(name, actual, mm, writable=writable)

    def unlink(self, name: str):
        try:
            os.unlink(_path_for(name))
        except FileNotFoundError:
            pass


class FakeShmBackend:
    """In-process stand-in used by unit tests: bytearray-backed segments."""

    class _Segment:
        def __init__(self, name, store):
            self.name = name
            self.size = len(store)
            self.writable = True
            self._store = store

        @property
        def buf(self):
            return memoryview(self._store)

        def close(self):
            pass

    def __init__(self):
        self._objects: dict[str, bytearray] = {}
        self._lock = threading.Lock()
        self.create_calls = 0
        self.unlink_calls = 0
        self.fail_next_create = False

    def create(self, name: str, size: int):
        with self._lock:
            if self.fail_next_create:
                self.fail_next_create = False
                raise errors.OsAllocationFailed("injected allocation failure")
            if name in self._objects:
                raise errors.OsAllocationFailed(f"object {name!r} already exists")
            self.create_calls += 1
            self._objects[name] = bytearray(size)
            return self._Segment(name, self._objects[name])

    def attach(self, name: str, size: int, writable: bool = False):
        with self._lock:
            store = self._objects.get(name)
            if store is None:
                raise errors.NoSuchObject(f"no shared-memory object named {name!r}")
            if len(store) < size:
                raise errors.SizeMismatch(f"object {name!r} has {len(store)} bytes, {size} requested")
            return self._Segment(name, store)

    def unlink(self, name: str):
        with self._lock:
            self.unlink_calls += 1
            self._objects.pop(name, None)


_default_backend = OsShmBackend()


def attach(os_name: str, size: int, writable: bool = False) -> ShmSegment:
    """Map an existing shared-memory object (receiver side)."""
    return _default_backend.attach(os_name, size, writable)
