"""Read-only user-space filesystem exporting cached files.

Talks the FUSE kernel protocol on ``/dev/fuse`` directly, so no libfuse or
fusermount helper is needed; mounting therefore requires CAP_SYS_ADMIN.
Every file read that reaches the kernel is answered from the block cache.

Layout: one flat directory whose entries are the basenames of the exported
files. Node 1 is the root; file i has node id i + 2.
"""
from __future__ import annotations

import ctypes
import ctypes.util
import errno
import logging
import os
import stat
import struct
import threading
import time
from dataclasses import dataclass, field

from .cache import CacheConfig, CacheCounters, CachedFile, register
from .errors import BusyError, MountError

log = logging.getLogger(__name__)

ROOT_ID = 1

# opcodes
LOOKUP, FORGET, GETATTR, SETATTR = 1, 2, 3, 4
OPEN, READ, WRITE, STATFS, RELEASE = 14, 15, 16, 17, 18
FLUSH, INIT, OPENDIR, READDIR, RELEASEDIR = 25, 26, 27, 28, 29
INTERRUPT, DESTROY, BATCH_FORGET = 36, 38, 42
MUTATING_OPS = frozenset({SETATTR, 6, 8, 9, 10, 11, 12, 13, WRITE, 21, 24, 35, 43, 45, 47})
NO_REPLY_OPS = frozenset({FORGET, BATCH_FORGET, INTERRUPT})

KERNEL_MAJOR = 7
MAX_MINOR = 31
FUSE_ASYNC_READ = 1 << 0
MAX_WRITE = 128 * 1024
READ_BUFFER = MAX_WRITE + 64 * 1024

IN_HEADER = struct.Struct("<IIQQIIIHH")
OUT_HEADER = struct.Struct("<IiQ")
INIT_IN = struct.Struct("<IIII")
INIT_OUT = struct.Struct("<IIIIHHIIHHI28x")
ATTR = struct.Struct("<QQQQQQIIIIIIIIII")
ENTRY_OUT = struct.Struct("<QQQQII")
ATTR_OUT = struct.Struct("<QII")
OPEN_IN = struct.Struct("<II")
OPEN_OUT = struct.Struct("<QIi")
READ_IN = struct.Struct("<QQIIQII")
RELEASE_IN = struct.Struct("<QII")
DIRENT = struct.Struct("<QQII")
KSTATFS = struct.Struct("<QQQQQIIII24x")

ATTR_TTL = 3600
RELEASE_GRACE = 0.5
# st_blksize; buffered readers size their reads from it, so keep it near the
# kernel's request size rather than the (much larger) cache block size
PREFERRED_IO = 128 * 1024

MS_RDONLY, MS_NOSUID, MS_NODEV = 1, 2, 4
MNT_DETACH = 2


class FuseError(OSError):
    """Raised inside a handler; becomes a negative errno in the reply."""

    def __init__(self, code: int):
        super().__init__(code, os.strerror(code))


@dataclass
class ExportedFile:
    name: str
    cached: CachedFile
    mtime: float


class ReadOnlyTree:
    """Filesystem operations over a flat set of cached files.

    Only lookup/getattr/open/read/release (plus directory listing and
    statfs) are implemented; anything that would modify the tree fails.
    """

    def __init__(self, files: list[ExportedFile]):
        self.files = files
        self._by_name = {f.name: i for i, f in enumerate(files)}
        self._handles: dict[int, int] = {}
        self._next_fh = 1
        self._lock = threading.Lock()
        self._uid, self._gid = os.getuid(), os.getgid()
        self._mounted_at = time.time()

    @property
    def open_handles(self) -> int:
        return len(self._handles)

    def _file(self, nodeid: int) -> ExportedFile:
        i = nodeid - 2
        if not 0 <= i < len(self.files):
            raise FuseError(errno.ENOENT)
        return self.files[i]

    def attr(self, nodeid: int) -> bytes:
        if nodeid == ROOT_ID:
            t = int(self._mounted_at)
            return ATTR.pack(ROOT_ID, 0, 0, t, t, t, 0, 0, 0,
                             stat.S_IFDIR | 0o555, 2, self._uid, self._gid, 0, 4096, 0)
        f = self._file(nodeid)
        size = f.cached.length
        t = int(f.mtime)
        return ATTR.pack(nodeid, size, -(-size // 512), t, t, t, 0, 0, 0,
                         stat.S_IFREG | 0o444, 1, self._uid, self._gid, 0,
                         min(f.cached.block_size, PREFERRED_IO), 0)

    def lookup(self, parent: int, name: str) -> int:
        if parent != ROOT_ID:
            raise FuseError(errno.ENOTDIR)
        try:
            return self._by_name[name] + 2
        except KeyError:
            raise FuseError(errno.ENOENT) from None

    def open(self, nodeid: int, flags: int) -> int:
        self._file(nodeid)
        if flags & os.O_ACCMODE != os.O_RDONLY or flags & (os.O_TRUNC | os.O_APPEND):
            raise FuseError(errno.EROFS)
        with self._lock:
            fh = self._next_fh
            self._next_fh += 1
            self._handles[fh] = nodeid
        return fh

    def read(self, fh: int, offset: int, size: int) -> bytes:
        try:
            nodeid = self._handles[fh]
        except KeyError:
            raise FuseError(errno.EBADF) from None
        return self._file(nodeid).cached.read(offset, size)

    def release(self, fh: int) -> None:
        with self._lock:
            self._handles.pop(fh, None)

    def entries(self) -> list[tuple[int, str, int]]:
        out = [(ROOT_ID, ".", stat.S_IFDIR), (ROOT_ID, "..", stat.S_IFDIR)]
        out += [(i + 2, f.name, stat.S_IFREG) for i, f in enumerate(self.files)]
        return out

    def readdir(self, offset: int, size: int) -> bytes:
        chunks = []
        used = 0
        for index, (ino, name, mode) in enumerate(self.entries()):
            if index < offset:
                continue
            raw = name.encode()
            entry = DIRENT.pack(ino, index + 1, len(raw), mode >> 12) + raw
            entry += b"\0" * (-len(entry) % 8)
            if used + len(entry) > size:
                break
            chunks.append(entry)
            used += len(entry)
        return b"".join(chunks)

    def statfs(self) -> bytes:
        total = sum(f.cached.length for f in self.files)
        return KSTATFS.pack(-(-total // 4096), 0, 0, len(self.files) + 1, 0, 4096, 255, 4096, 0)


class FuseServer:
    """Decodes kernel requests and encodes replies for a :class:`ReadOnlyTree`."""

    def __init__(self, tree: ReadOnlyTree):
        self.tree = tree
        self.proto_minor = 0
        self.destroyed = False

    def handle(self, request: bytes) -> bytes | None:
        length, opcode, unique, nodeid, *_ = IN_HEADER.unpack_from(request)
        body = memoryview(request)[IN_HEADER.size : length]
        if opcode in NO_REPLY_OPS:
            return None
        try:
            payload = self._dispatch(opcode, nodeid, body)
            err = 0
        except FuseError as exc:
            payload, err = b"", -exc.errno
        except Exception:
            log.exception("fuse op %d failed", opcode)
            payload, err = b"", -errno.EIO
        return OUT_HEADER.pack(OUT_HEADER.size + len(payload), err, unique) + payload

    def _dispatch(self, opcode: int, nodeid: int, body: memoryview) -> bytes:
        tree = self.tree
        if opcode == INIT:
            major, minor, max_readahead, _flags = INIT_IN.unpack_from(body)
            if major != KERNEL_MAJOR:
                raise FuseError(errno.EPROTO)
            self.proto_minor = min(minor, MAX_MINOR)
            return INIT_OUT.pack(KERNEL_MAJOR, self.proto_minor, max_readahead,
                                 FUSE_ASYNC_READ, 16, 12, MAX_WRITE, 1, 0, 0, 0)
        if opcode == LOOKUP:
            name = bytes(body).split(b"\0", 1)[0].decode()
            child = tree.lookup(nodeid, name)
            return ENTRY_OUT.pack(child, 0, ATTR_TTL, ATTR_TTL, 0, 0) + tree.attr(child)
        if opcode == GETATTR:
            return ATTR_OUT.pack(ATTR_TTL, 0, 0) + tree.attr(nodeid)
        if opcode == OPEN:
            flags, _ = OPEN_IN.unpack_from(body)
            return OPEN_OUT.pack(tree.open(nodeid, flags), 0, 0)
        if opcode == READ:
            fh, offset, size, *_ = READ_IN.unpack_from(body)
            return tree.read(fh, offset, size)
        if opcode == RELEASE:
            fh, *_ = RELEASE_IN.unpack_from(body)
            tree.release(fh)
            return b""
        if opcode == OPENDIR:
            if nodeid != ROOT_ID:
                raise FuseError(errno.ENOTDIR)
            return OPEN_OUT.pack(0, 0, 0)
        if opcode == READDIR:
            _, offset, size, *_ = READ_IN.unpack_from(body)
            return tree.readdir(offset, size)
        if opcode == RELEASEDIR:
            return b""
        if opcode == STATFS:
            return tree.statfs()
        if opcode == DESTROY:
            self.destroyed = True
            return b""
        if opcode in MUTATING_OPS:
            raise FuseError(errno.EROFS)
        raise FuseError(errno.ENOSYS)


_libc = None


def _c():
    global _libc
    if _libc is None:
        _libc = ctypes.CDLL(ctypes.util.find_library("c"), use_errno=True)
    return _libc


def _sys_mount(fd: int, mountpoint: str) -> None:
    opts = f"fd={fd},rootmode=40000,user_id={os.getuid()},group_id={os.getgid()}"
    rc = _c().mount(b"pgfuse", os.fsencode(mountpoint), b"fuse.pgfuse",
                    MS_RDONLY | MS_NOSUID | MS_NODEV, opts.encode())
    if rc != 0:
        code = ctypes.get_errno()
        raise MountError(code, f"mount {mountpoint}: {os.strerror(code)}")


def sys_umount(mountpoint, detach: bool = False) -> None:
    rc = _c().umount2(os.fsencode(os.fspath(mountpoint)), MNT_DETACH if detach else 0)
    if rc != 0:
        code = ctypes.get_errno()
        if code == errno.EBUSY:
            raise BusyError(f"{mountpoint} is busy; close open files and retry")
        raise MountError(code, f"umount {mountpoint}: {os.strerror(code)}")


def fuse_available() -> tuple[bool, str]:
    """Whether this host can mount; the second element explains a ``False``."""
    if not os.path.exists("/dev/fuse"):
        return False, "/dev/fuse missing"
    try:
        with open("/proc/filesystems") as f:
            if not any(line.split()[-1] == "fuse" for line in f if line.strip()):
                return False, "kernel has no fuse filesystem"
    except OSError:
        return False, "cannot read /proc/filesystems"
    if os.geteuid() != 0:
        return False, "mounting without fusermount needs root"
    try:
        os.close(os.open("/dev/fuse", os.O_RDWR))
    except OSError as exc:
        return False, f"cannot open /dev/fuse: {exc.strerror}"
    return True, ""


@dataclass
class MountSession:
    mountpoint: str
    files: dict[str, CachedFile]
    server: FuseServer
    state: str = "mounted"
    final_counters: dict[str, CacheCounters] = field(default_factory=dict)
    _fd: int = -1
    _workers: list[threading.Thread] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def mounted(self) -> bool:
        return self.state == "mounted"

    def counters(self) -> dict[str, CacheCounters]:
        if not self.mounted:
            return dict(self.final_counters)
        return {name: f.counters() for name, f in self.files.items()}

    def _serve(self):
        fd = self._fd
        while True:
            try:
                request = os.read(fd, READ_BUFFER)
            except OSError as exc:
                if exc.errno in (errno.EINTR, errno.EAGAIN, errno.ENOENT):
                    continue
                if exc.errno != errno.ENODEV:
                    log.error("fuse channel error: %s", exc)
                return
            if not request:
                return
            reply = self.server.handle(request)
            if reply is None:
                continue
            try:
                os.write(fd, reply)
            except OSError as exc:
                # ENOENT: the request was interrupted and no longer wants a reply
                if exc.errno not in (errno.ENOENT, errno.EINTR):
                    log.warning("fuse reply failed: %s", exc)

    def wait(self, timeout: float | None = None) -> None:
        """Block until the filesystem is unmounted (possibly from elsewhere)."""
        for t in self._workers:
            t.join(timeout)
        if not any(t.is_alive() for t in self._workers):
            self._teardown()

    def unmount(self) -> bool:
        """Unmount and release every cached block.

        Returns False (and does nothing) when already unmounted.
        """
        # the kernel sends RELEASE asynchronously after close(), so allow a moment
        deadline = time.monotonic() + RELEASE_GRACE
        while self.server.tree.open_handles and time.monotonic() < deadline:
            time.sleep(0.01)
        with self._lock:
            if not self.mounted:
                return False
            if self.server.tree.open_handles:
                raise BusyError(
                    f"{self.mountpoint} has {self.server.tree.open_handles} open "
                    "file handle(s); close them and retry"
                )
            sys_umount(self.mountpoint)
        self.wait()
        return True

    def _teardown(self):
        with self._lock:
            if self.state == "unmounted":
                return
            self.final_counters = {name: f.counters() for name, f in self.files.items()}
            for f in self.files.values():
                f.unregister()
            self.final_counters = {name: f.counters() for name, f in self.files.items()}
            if self._fd >= 0:
                os.close(self._fd)
                self._fd = -1
            self.state = "unmounted"
            log.info("unmounted %s", self.mountpoint)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.unmount()


def export_files(paths, config: CacheConfig) -> list[ExportedFile]:
    names: dict[str, str] = {}
    for p in paths:
        name = os.path.basename(os.fspath(p))
        if name in names:
            raise ValueError(f"duplicate exported name {name!r}: {names[name]} and {p}")
        names[name] = os.fspath(p)
    exported = []
    try:
        for name, p in names.items():
            exported.append(ExportedFile(name, register(p, config), os.stat(p).st_mtime))
    except BaseException:
        for f in exported:
            f.cached.unregister()
        raise
    return exported


def mount(paths, mountpoint, config: CacheConfig | None = None, *,
          threads: int = 4) -> MountSession:
    """Mount ``paths`` read-only under ``mountpoint`` and start serving."""
    config = config or CacheConfig()
    mountpoint = os.path.abspath(os.fspath(mountpoint))
    if not os.path.isdir(mountpoint):
        raise MountError(errno.ENOTDIR, f"{mountpoint} is not a directory")
    if os.listdir(mountpoint):
        raise MountError(errno.ENOTEMPTY, f"{mountpoint} is not empty")
    exported = export_files(paths, config)
    try:
        fd = os.open("/dev/fuse", os.O_RDWR)
    except OSError as exc:
        for f in exported:
            f.cached.unregister()
        raise MountError(exc.errno, f"cannot open /dev/fuse: {exc.strerror}") from exc
    try:
        _sys_mount(fd, mountpoint)
    except MountError:
        os.close(fd)
        for f in exported:
            f.cached.unregister()
        raise
    session = MountSession(mountpoint, {f.name: f.cached for f in exported},
                           FuseServer(ReadOnlyTree(exported)), _fd=fd)
    for i in range(threads):
        t = threading.Thread(target=session._serve, name=f"pgfuse-{i}", daemon=True)
        t.start()
        session._workers.append(t)
    log.info("mounted %d file(s) at %s", len(exported), mountpoint)
    return session


def unmount(session: MountSession) -> bool:
    return session.unmount()
