"""Large-block read cache over backing files.

Each file is split into fixed-size blocks. A block's life is driven by a
signed status word that only ever changes by compare-and-swap:

    -1  not loaded
    -2  a thread is loading it; others wait
    -3  a thread is revoking it; others wait
     0  loaded and idle (evictable)
     k  loaded and leased by k readers

Legal transitions: -1 -> -2, -2 -> 1 (load done, the loader holds the first
lease), -2 -> -1 (load failed), k -> k+1 for k >= 0, k -> k-1 for k >= 1,
0 -> -3 and -3 -> -1.
"""
from __future__ import annotations

import ctypes
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

from .errors import (
    BusyError,
    ClosedError,
    LeaseError,
    PartialReadError,
    RegistrationError,
)

log = logging.getLogger(__name__)

NOT_LOADED = -1
LOADING = -2
REVOKING = -3
IDLE = 0

DEFAULT_BLOCK_SIZE = 32 * 1024 * 1024
MIN_BLOCK_SIZE = 4096
POISON_BYTE = 0xDB

LEGAL_TRANSITIONS = frozenset({(NOT_LOADED, LOADING), (LOADING, 1), (LOADING, NOT_LOADED),
                               (IDLE, REVOKING), (REVOKING, NOT_LOADED)})


def is_legal_transition(old: int, new: int) -> bool:
    if (old, new) in LEGAL_TRANSITIONS:
        return True
    return old >= 0 and new >= 0 and abs(new - old) == 1


@dataclass(frozen=True)
class WaitPolicy:
    """How a thread waits on a block that is loading or being revoked.

    It re-checks ``spins`` times, then yields the interpreter ``yields``
    times, then parks on the block's condition variable for at most
    ``park_timeout`` seconds per round.
    """

    spins: int = 32
    yields: int = 4
    park_timeout: float = 0.005


@dataclass(frozen=True)
class CacheConfig:
    block_size: int = DEFAULT_BLOCK_SIZE
    memory_budget: int = 4 * DEFAULT_BLOCK_SIZE
    wait_policy: WaitPolicy = field(default_factory=WaitPolicy)
    # overwrite buffers on revocation so a use-after-free shows up as bad bytes
    poison_freed: bool = False

    def __post_init__(self):
        bs = self.block_size
        if bs < MIN_BLOCK_SIZE or bs & (bs - 1):
            raise ValueError(f"block_size must be a power of two >= {MIN_BLOCK_SIZE}, got {bs}")
        if self.memory_budget < bs:
            raise ValueError(
                f"memory_budget ({self.memory_budget}) must be >= block_size ({bs})"
            )


class AtomicInt:
    """An integer whose updates are linearisable across threads."""

    __slots__ = ("_value", "_lock")

    def __init__(self, value: int = 0):
        self._value = value
        self._lock = threading.Lock()

    def load(self) -> int:
        return self._value

    def compare_and_swap(self, expected: int, new: int) -> bool:
        with self._lock:
            if self._value != expected:
                return False
            self._value = new
            return True

    def add(self, delta: int) -> int:
        with self._lock:
            self._value += delta
            return self._value


class Backing(Protocol):
    size: int

    def read_block(self, offset: int, into: memoryview) -> int: ...

    def close(self) -> None: ...


class FileBacking:
    """The real file under the cache; every call is one backing read."""

    def __init__(self, path):
        self.path = os.fspath(path)
        try:
            self._fd = os.open(self.path, os.O_RDONLY)
            self.size = os.fstat(self._fd).st_size
        except OSError as exc:
            raise RegistrationError(f"cannot register {self.path}: {exc.strerror}") from exc

    def read_block(self, offset, into):
        done = 0
        while done < len(into):
            n = os.preadv(self._fd, [into[done:]], offset + done)
            if n == 0:
                raise OSError(f"unexpected end of {self.path} at byte {offset + done}")
            done += n
        return done

    def close(self):
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1


@dataclass
class CacheCounters:
    backing_reads: int = 0
    cache_hits: int = 0
    wait_events: int = 0
    evictions: int = 0
    resident_bytes: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(self.__dict__)


class CacheBlock:
    __slots__ = ("index", "offset", "length", "status", "buffer", "last_access",
                 "attempt", "failure", "cond")

    def __init__(self, index: int, offset: int, length: int):
        self.index = index
        self.offset = offset
        self.length = length
        self.status = AtomicInt(NOT_LOADED)
        self.buffer: bytearray | None = None
        self.last_access = 0
        self.attempt = 0
        self.failure: tuple[int, BaseException] | None = None
        self.cond = threading.Condition(threading.Lock())


class Lease:
    """A read lease on one block; the buffer stays resident until released."""

    __slots__ = ("file", "block", "_released")

    def __init__(self, file: CachedFile, block: CacheBlock):
        self.file = file
        self.block = block
        self._released = False

    @property
    def index(self) -> int:
        return self.block.index

    @property
    def data(self) -> memoryview:
        return memoryview(self.block.buffer)[: self.block.length]

    def release(self):
        if self._released:
            raise LeaseError(f"lease on block {self.block.index} released twice")
        self._released = True
        self.file.release(self.block.index)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if not self._released:
            self.release()


TransitionHook = Callable[[int, int, int], None]


class CachedFile:
    """A backing file registered with the cache. Use :func:`register`."""

    def __init__(self, backing: Backing, config: CacheConfig, *,
                 clock: Callable[[], int] = time.monotonic_ns,
                 on_transition: TransitionHook | None = None,
                 name: str | None = None):
        self.backing = backing
        self.config = config
        self.name = name or getattr(backing, "path", "<anonymous>")
        self.length = backing.size
        self.block_size = config.block_size
        nblocks = -(-self.length // self.block_size)
        self.blocks = [
            CacheBlock(i, i * self.block_size,
                       min(self.block_size, self.length - i * self.block_size))
            for i in range(nblocks)
        ]
        self._clock = clock
        self._on_transition = on_transition
        self._admission = threading.Lock()
        self._room = threading.Condition(threading.Lock())
        self._room_waiters = 0
        self._resident: set[int] = set()
        self._resident_bytes = 0
        self._spare: list[bytearray] = []
        self._spare_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self._stats = CacheCounters()
        self._closed = False

    def __repr__(self):
        return (f"CachedFile({self.name!r}, {self.length} bytes, "
                f"{len(self.blocks)} x {self.block_size})")

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    @property
    def resident_bytes(self) -> int:
        return self._resident_bytes

    def counters(self) -> CacheCounters:
        with self._stats_lock:
            snap = CacheCounters(**self._stats.as_dict())
        snap.resident_bytes = self._resident_bytes
        return snap

    def statuses(self) -> list[int]:
        return [b.status.load() for b in self.blocks]

    def _count(self, name: str, n: int = 1):
        with self._stats_lock:
            setattr(self._stats, name, getattr(self._stats, name) + n)

    def _cas(self, block: CacheBlock, old: int, new: int) -> bool:
        ok = block.status.compare_and_swap(old, new)
        if ok and self._on_transition is not None:
            self._on_transition(block.index, old, new)
        return ok

    def _check_open(self):
        if self._closed:
            raise ClosedError(f"{self.name} has been unregistered")

    # -- leases ---------------------------------------------------------

    def acquire(self, block_index: int) -> Lease:
        """Lease block ``block_index``, loading it on a miss."""
        self._check_open()
        if not 0 <= block_index < len(self.blocks):
            raise IndexError(f"block {block_index} out of range [0, {len(self.blocks)})")
        block = self.blocks[block_index]
        waited = False
        while True:
            s = block.status.load()
            if s >= 0:
                if self._cas(block, s, s + 1):
                    self._count("cache_hits")
                    return Lease(self, block)
                continue
            if s == NOT_LOADED:
                if self._cas(block, NOT_LOADED, LOADING):
                    self._load(block)
                    return Lease(self, block)
                continue
            if not waited:
                self._count("wait_events")
                waited = True
            attempt = block.attempt
            self._wait_while(block, s)
            failure = block.failure
            # the loader bumps ``attempt`` just after winning the CAS, so ours may lag by one
            if s == LOADING and failure is not None and failure[0] >= attempt:
                raise failure[1]

    def release(self, block_index: int) -> None:
        block = self.blocks[block_index]
        block.last_access = self._clock()
        while True:
            s = block.status.load()
            if s <= 0:
                raise LeaseError(
                    f"release of block {block_index} without a lease (status {s})"
                )
            if self._cas(block, s, s - 1):
                break
        if s == 1 and self._room_waiters:
            with self._room:
                self._room.notify_all()

    def _wait_while(self, block: CacheBlock, status: int):
        policy = self.config.wait_policy
        for _ in range(policy.spins):
            if block.status.load() != status:
                return
        for _ in range(policy.yields):
            time.sleep(0)
            if block.status.load() != status:
                return
        with block.cond:
            while block.status.load() == status:
                block.cond.wait(policy.park_timeout)

    def _wake(self, block: CacheBlock):
        with block.cond:
            block.cond.notify_all()

    def _load(self, block: CacheBlock):
        # we own the LOADING sentinel here
        block.attempt += 1
        attempt = block.attempt
        try:
            self._admit(block.length)
        except BaseException as exc:
            block.failure = (attempt, exc)
            self._cas(block, LOADING, NOT_LOADED)
            self._wake(block)
            raise
        buf = self._take_buffer(block.length)
        try:
            self.backing.read_block(block.offset, memoryview(buf)[: block.length])
        except BaseException as exc:
            self._give_back(buf)
            with self._admission:
                self._resident_bytes -= block.length
            block.failure = (attempt, exc)
            self._cas(block, LOADING, NOT_LOADED)
            self._wake(block)
            self._notify_room()
            raise
        self._count("backing_reads")
        block.buffer = buf
        block.failure = None
        with self._admission:
            self._resident.add(block.index)
        self._cas(block, LOADING, 1)
        self._wake(block)

    # -- memory ---------------------------------------------------------

    def _take_buffer(self, length: int) -> bytearray:
        if length == self.block_size:
            with self._spare_lock:
                if self._spare:
                    return self._spare.pop()
        return bytearray(length)

    def _give_back(self, buf: bytearray):
        if self.config.poison_freed:
            ctypes.memset((ctypes.c_char * len(buf)).from_buffer(buf), POISON_BYTE, len(buf))
        if len(buf) == self.block_size:
            with self._spare_lock:
                if len(self._spare) < 2:
                    self._spare.append(buf)

    def _admit(self, nbytes: int):
        """Reserve ``nbytes`` of budget, revoking idle blocks as needed.

        Admission may overshoot the budget by at most one block; beyond that
        the caller waits for a lease to be released.
        """
        budget = self.config.memory_budget
        while True:
            with self._admission:
                over = self._resident_bytes + nbytes - budget
                if over > 0:
                    self._evict_locked(over)
                    over = self._resident_bytes + nbytes - budget
                if over <= self.block_size:
                    self._resident_bytes += nbytes
                    return
            self._count("wait_events")
            with self._room:
                self._room_waiters += 1
                try:
                    self._room.wait(self.config.wait_policy.park_timeout)
                finally:
                    self._room_waiters -= 1

    def _notify_room(self):
        if self._room_waiters:
            with self._room:
                self._room.notify_all()

    def evict(self, needed: int) -> int:
        """Revoke least recently used idle blocks until ``needed`` bytes are freed.

        Returns the bytes actually freed, which may be less when too few
        blocks are idle. Leased blocks are never touched.
        """
        self._check_open()
        with self._admission:
            freed = self._evict_locked(needed)
        if freed:
            self._notify_room()
        return freed

    def _evict_locked(self, needed: int) -> int:
        candidates = sorted(
            (self.blocks[i].last_access, i)
            for i in self._resident
            if self.blocks[i].status.load() == IDLE
        )
        freed = 0
        for _, i in candidates:
            if freed >= needed:
                break
            block = self.blocks[i]
            if not self._cas(block, IDLE, REVOKING):
                continue
            buf, block.buffer = block.buffer, None
            self._resident.discard(i)
            self._resident_bytes -= block.length
            freed += block.length
            self._give_back(buf)
            self._cas(block, REVOKING, NOT_LOADED)
            self._wake(block)
            self._count("evictions")
        return freed

    # -- reads ----------------------------------------------------------

    def readinto(self, offset: int, buf) -> int:
        """Copy bytes starting at ``offset`` into ``buf``; returns the count.

        Blocks are leased one at a time in ascending order, so a read never
        holds two leases at once.
        """
        self._check_open()
        if offset < 0:
            raise ValueError(f"negative offset {offset}")
        out = memoryview(buf).cast("B")
        end = min(offset + len(out), self.length)
        pos = offset
        while pos < end:
            index = pos // self.block_size
            try:
                lease = self.acquire(index)
            except Exception as exc:
                raise PartialReadError(pos - offset, exc) from exc
            with lease:
                start = pos - lease.block.offset
                n = min(end - pos, lease.block.length - start)
                out[pos - offset : pos - offset + n] = lease.data[start : start + n]
            pos += n
        return max(0, end - offset)

    def read(self, offset: int, length: int) -> bytes:
        if offset >= self.length:
            return b""
        buf = bytearray(min(length, self.length - offset))
        self.readinto(offset, buf)
        return bytes(buf)

    # -- lifecycle ------------------------------------------------------

    def unregister(self) -> None:
        if self._closed:
            return
        with self._admission:
            busy = [b.index for b in self.blocks if b.status.load() not in (NOT_LOADED, IDLE)]
            if busy:
                raise BusyError(f"{self.name}: blocks {busy[:8]} still leased or in transition")
            for i in sorted(self._resident):
                block = self.blocks[i]
                if self._cas(block, IDLE, REVOKING):
                    block.buffer = None
                    self._resident_bytes -= block.length
                    self._cas(block, REVOKING, NOT_LOADED)
            self._resident.clear()
            self._spare.clear()
            self._closed = True
        self.backing.close()
        log.debug("unregistered %s", self.name)

    close = unregister

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.unregister()


def register(path, config: CacheConfig | None = None, *, backing: Backing | None = None,
             **kwargs) -> CachedFile:
    """Register a backing file with the cache; no block is loaded yet."""
    config = config or CacheConfig()
    if backing is None:
        backing = FileBacking(path)
    return CachedFile(backing, config, name=os.fspath(path) if path is not None else None,
                      **kwargs)


def unregister(file: CachedFile) -> None:
    file.unregister()
