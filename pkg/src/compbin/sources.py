"""Positioned byte sources a CompBin graph can be read from.

Everything here exposes ``size`` and ``read_at(offset, length)`` and is safe
to call from many threads at once.
"""
from __future__ import annotations

import mmap
import os
from typing import Protocol, runtime_checkable


@runtime_checkable
class ByteSource(Protocol):
    size: int

    def read_at(self, offset: int, length: int) -> bytes | memoryview: ...


class MemorySource:
    """A bytes-like object (bytes, bytearray, mmap) viewed as a source."""

    def __init__(self, data):
        self._view = memoryview(data).cast("B")
        self.size = len(self._view)

    def read_at(self, offset, length):
        return self._view[offset : offset + length]

    def close(self):
        self._view.release()


class FileSource:
    """Direct positioned reads (``pread``) on a file, one syscall per call."""

    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        self._fd = os.open(self.path, os.O_RDONLY)
        self.size = os.fstat(self._fd).st_size
        self.reads = 0

    def read_at(self, offset, length):
        self.reads += 1
        return os.pread(self._fd, length, offset)

    def close(self):
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class MmapSource(MemorySource):
    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        with open(self.path, "rb") as f:
            if os.fstat(f.fileno()).st_size == 0:
                self._map = None
                super().__init__(b"")
                return
            self._map = mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ)
        super().__init__(self._map)

    def close(self):
        super().close()
        if self._map is not None:
            self._map.close()
            self._map = None


class CachedSource:
    """Route reads through a :class:`compbin.cache.CachedFile`."""

    def __init__(self, cached_file):
        self.file = cached_file
        self.size = cached_file.length

    def read_at(self, offset, length):
        return self.file.read(offset, length)

    def close(self):
        pass


def as_source(obj) -> ByteSource:
    if isinstance(obj, (str, os.PathLike)):
        return FileSource(obj)
    if isinstance(obj, (bytes, bytearray, memoryview, mmap.mmap)):
        return MemorySource(obj)
    if isinstance(obj, ByteSource):
        return obj
    # lazy import keeps the cache optional for format-only users
    from .cache import CachedFile

    if isinstance(obj, CachedFile):
        return CachedSource(obj)
    raise TypeError(f"cannot read a CompBin graph from {type(obj).__name__}")
