"""CompBin: CSR with neighbor IDs packed into the fewest whole bytes.

On-storage layout (all integers little-endian)::

    0   b"CBIN"
    4   u16 version (= 1)
    6   u8  bytes per vertex ID (b)
    7   u8  reserved (= 0)
    8   u64 vertex count |V|
    16  u64 edge count |E|
    24  u64 offsets[|V| + 1]
    ..  neighbors: |E| groups of b bytes, least significant byte first
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator

import numpy as np

from .errors import (
    BoundsError,
    EncodeOverflowError,
    FormatError,
    InvalidGraphError,
    SinkError,
)
from .sources import ByteSource, MmapSource, as_source

MAGIC = b"CBIN"
VERSION = 1
HEADER_STRUCT = struct.Struct("<4sHBBQQ")
HEADER_SIZE = HEADER_STRUCT.size  # 24
OFFSET_WIDTH = 8
MAX_BYTES_PER_ID = 8

_NATIVE_DTYPES = {1: "<u1", 2: "<u2", 4: "<u4", 8: "<u8"}


def bytes_per_id(vertex_count: int) -> int:
    """Smallest whole number of bytes that can hold every ID below ``vertex_count``.

    Integer-exact: with k the smallest integer such that 2**k >= |V|, the
    result is ceil(k / 8), floored at one byte.
    """
    if vertex_count < 1:
        raise InvalidGraphError(f"vertex count must be >= 1, got {vertex_count}")
    if vertex_count > 1 << 64:
        raise InvalidGraphError(f"vertex count {vertex_count} exceeds 2**64")
    k = (vertex_count - 1).bit_length()
    return max(1, -(-k // 8))


def encode_neighbor(vertex: int, b: int) -> bytes:
    if not 1 <= b <= MAX_BYTES_PER_ID:
        raise InvalidGraphError(f"bytes per id must be in 1..8, got {b}")
    if vertex < 0 or vertex >> (8 * b):
        raise EncodeOverflowError(f"vertex {vertex} does not fit in {b} bytes")
    return bytes((vertex >> (8 * i)) & 0xFF for i in range(b))


def decode_group(group: bytes | memoryview) -> int:
    # sum over i of group[i] << 8i
    value = 0
    for i, byte in enumerate(group):
        value += byte << (8 * i)
    return value


def encode_ids(ids: np.ndarray, b: int) -> np.ndarray:
    """Pack an array of vertex IDs into an (n, b) uint8 array."""
    ids = np.asarray(ids)
    if ids.size:
        lo, hi = int(ids.min()), int(ids.max())
        if lo < 0 or hi >> (8 * b):
            bad = lo if lo < 0 else hi
            raise EncodeOverflowError(f"vertex {bad} does not fit in {b} bytes")
    wide = np.ascontiguousarray(ids, dtype="<u8")
    return np.ascontiguousarray(wide.view(np.uint8).reshape(-1, 8)[:, :b])


def decode_ids(raw, b: int, out: np.ndarray | None = None) -> np.ndarray:
    """Vectorised inverse of :func:`encode_ids` over a run of b-byte groups."""
    if isinstance(raw, np.ndarray):
        groups = np.ascontiguousarray(raw, dtype=np.uint8).reshape(-1)
    else:
        groups = np.frombuffer(raw, dtype=np.uint8)
    if groups.size % b:
        raise FormatError("neighbors", f"{groups.size} bytes is not a whole number of {b}-byte IDs")
    n = groups.size // b
    if out is None:
        out = np.empty(n, dtype=np.uint64)
    else:
        out = out[:n]
    if b in _NATIVE_DTYPES:
        out[:] = groups.view(_NATIVE_DTYPES[b])
        return out
    groups = groups.reshape(n, b)
    out[:] = groups[:, 0]
    for i in range(1, b):
        out |= groups[:, i].astype(np.uint64) << np.uint64(8 * i)
    return out


def predicted_size(vertex_count: int, edge_count: int, b: int | None = None) -> int:
    """Exact file size in bytes for a graph of the given shape."""
    if b is None:
        b = bytes_per_id(vertex_count)
    return HEADER_SIZE + OFFSET_WIDTH * (vertex_count + 1) + b * edge_count


@dataclass(frozen=True)
class GraphHeader:
    vertex_count: int
    edge_count: int
    bytes_per_id: int
    version: int = VERSION
    magic: bytes = MAGIC

    @classmethod
    def for_graph(cls, vertex_count: int, edge_count: int) -> GraphHeader:
        return cls(vertex_count, edge_count, bytes_per_id(vertex_count))

    def pack(self) -> bytes:
        return HEADER_STRUCT.pack(
            self.magic, self.version, self.bytes_per_id, 0,
            self.vertex_count, self.edge_count,
        )

    @classmethod
    def unpack(cls, raw: bytes) -> GraphHeader:
        if len(raw) < HEADER_SIZE:
            raise FormatError("header", f"truncated: {len(raw)} of {HEADER_SIZE} bytes")
        magic, version, b, reserved, nv, ne = HEADER_STRUCT.unpack(raw[:HEADER_SIZE])
        header = cls(nv, ne, b, version, magic)
        header.validate(reserved)
        return header

    def validate(self, reserved: int = 0) -> None:
        if self.magic != MAGIC:
            raise FormatError("magic", f"expected {MAGIC!r}, found {self.magic!r}")
        if self.version != VERSION:
            raise FormatError("version", f"unsupported version {self.version}")
        if reserved != 0:
            raise FormatError("reserved", f"must be 0, found {reserved}")
        if self.vertex_count < 1:
            raise FormatError("vertex_count", "must be >= 1")
        expected = bytes_per_id(self.vertex_count)
        if self.bytes_per_id != expected:
            raise FormatError(
                "bytes_per_id",
                f"{self.bytes_per_id} does not match {expected} required for "
                f"{self.vertex_count} vertices",
            )

    @property
    def offsets_start(self) -> int:
        return HEADER_SIZE

    @property
    def neighbors_start(self) -> int:
        return HEADER_SIZE + OFFSET_WIDTH * (self.vertex_count + 1)

    @property
    def file_size(self) -> int:
        return predicted_size(self.vertex_count, self.edge_count, self.bytes_per_id)


class CompBinGraph:
    """Random-access view of a CompBin graph.

    The offsets array is held in memory; neighbor groups are fetched from
    ``source`` on demand, so opening a graph does not touch the neighbors
    section. Instances are immutable and can be shared between threads.
    """

    def __init__(self, header: GraphHeader, offsets: np.ndarray, source: ByteSource,
                 neighbors_start: int):
        self.header = header
        self.offsets = offsets
        self.source = source
        self._base = neighbors_start
        self._b = header.bytes_per_id

    @property
    def vertex_count(self) -> int:
        return self.header.vertex_count

    @property
    def edge_count(self) -> int:
        return self.header.edge_count

    @property
    def bytes_per_id(self) -> int:
        return self._b

    def __repr__(self):
        h = self.header
        return f"CompBinGraph(|V|={h.vertex_count}, |E|={h.edge_count}, b={h.bytes_per_id})"

    def degree(self, v: int) -> int:
        return degree(self, v)

    def neighbor(self, v: int, n: int) -> int:
        return decode_neighbor(self, v, n)

    def neighbor_bytes(self, first_edge: int, last_edge: int):
        """Raw b-byte groups for edge indices [first_edge, last_edge)."""
        b = self._b
        return self.source.read_at(self._base + first_edge * b, (last_edge - first_edge) * b)

    def edge_slice(self, first_edge: int, last_edge: int, out=None) -> np.ndarray:
        return decode_ids(self.neighbor_bytes(first_edge, last_edge), self._b, out)

    def neighbors(self, v: int) -> np.ndarray:
        self._check_vertex(v)
        return self.edge_slice(int(self.offsets[v]), int(self.offsets[v + 1]))

    def iter_edges(self) -> Iterator[tuple[int, int]]:
        for v in range(self.vertex_count):
            for u in self.neighbors(v).tolist():
                yield v, u

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(sources, destinations) for every edge, in storage order."""
        degrees = np.diff(self.offsets).astype(np.intp)
        src = np.repeat(np.arange(self.vertex_count, dtype=np.uint64), degrees)
        return src, self.edge_slice(0, self.edge_count)

    def _check_vertex(self, v):
        if not 0 <= v < self.header.vertex_count:
            raise BoundsError(f"vertex {v} out of range [0, {self.header.vertex_count})")

    def close(self):
        close = getattr(self.source, "close", None)
        if close is not None:
            close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def degree(graph: CompBinGraph, v: int) -> int:
    graph._check_vertex(v)
    return int(graph.offsets[v + 1]) - int(graph.offsets[v])


def decode_neighbor(graph: CompBinGraph, v: int, n: int) -> int:
    """ID of the n-th neighbor of vertex v, decoded straight from the packed bytes."""
    d = degree(graph, v)
    if not 0 <= n < d:
        raise BoundsError(f"neighbor index {n} out of range for vertex {v} of degree {d}")
    b = graph.bytes_per_id
    position = (int(graph.offsets[v]) + n) * b
    return decode_group(graph.source.read_at(graph._base + position, b))


def build_offsets(degrees: np.ndarray) -> np.ndarray:
    offsets = np.zeros(len(degrees) + 1, dtype=np.uint64)
    np.cumsum(degrees, out=offsets[1:])
    return offsets


def place_edges(src: np.ndarray, dst: np.ndarray, cursor: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Counting-sort placement of one batch of edges.

    ``cursor[v]`` is the next free edge slot of vertex v and is advanced in
    place. Returns (slots, destinations) with edges of the same source kept
    in input order.
    """
    if len(src) == 0:
        return np.empty(0, dtype=np.uint64), np.empty(0, dtype=np.uint64)
    src = src.astype(np.intp, copy=False)
    order = np.argsort(src, kind="stable")
    s = src[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    counts = np.diff(np.r_[starts, len(s)])
    rank = np.arange(len(s)) - np.repeat(starts, counts)
    slots = cursor[s] + rank.astype(np.uint64)
    cursor[s[starts]] += counts.astype(np.uint64)
    return slots, dst[order]


def from_edges(src, dst, vertex_count: int | None = None,
               sort_neighbors: bool = False) -> CompBinGraph:
    """Build an in-memory CompBin graph from parallel source/destination arrays."""
    src = np.asarray(src, dtype=np.uint64)
    dst = np.asarray(dst, dtype=np.uint64)
    if src.shape != dst.shape:
        raise InvalidGraphError("source and destination arrays differ in length")
    if vertex_count is None:
        vertex_count = int(max(src.max(), dst.max())) + 1 if src.size else 1
    if src.size and int(max(src.max(), dst.max())) >= vertex_count:
        raise InvalidGraphError(f"edge endpoint >= vertex count {vertex_count}")
    header = GraphHeader.for_graph(vertex_count, int(src.size))
    degrees = np.bincount(src.astype(np.intp), minlength=vertex_count)
    offsets = build_offsets(degrees.astype(np.uint64))
    cursor = offsets[:-1].copy()
    slots, targets = place_edges(src, dst, cursor)
    ids = np.empty(src.size, dtype=np.uint64)
    ids[slots.astype(np.intp)] = targets
    if sort_neighbors:
        ids = sort_within_vertices(offsets, ids)
    neighbors = encode_ids(ids, header.bytes_per_id).tobytes()
    return CompBinGraph(header, offsets, as_source(neighbors), 0)


def sort_within_vertices(offsets: np.ndarray, ids: np.ndarray) -> np.ndarray:
    owner = np.repeat(np.arange(len(offsets) - 1), np.diff(offsets).astype(np.intp))
    return ids[np.lexsort((ids, owner))]


def write_compbin(graph: CompBinGraph, sink: BinaryIO) -> int:
    """Serialise ``graph`` to a writable binary stream; returns bytes written."""
    h = graph.header
    written = 0

    def emit(chunk):
        nonlocal written
        try:
            sink.write(chunk)
        except OSError as exc:
            raise SinkError(written, exc) from exc
        written += len(chunk)

    emit(h.pack())
    emit(np.ascontiguousarray(graph.offsets, dtype="<u8").tobytes())
    step = 1 << 22
    for e in range(0, h.edge_count, step):
        emit(bytes(graph.neighbor_bytes(e, min(e + step, h.edge_count))))
    return written


def save(graph: CompBinGraph, path: str | os.PathLike) -> int:
    with open(path, "wb") as f:
        return write_compbin(graph, f)


def open_compbin(source, *, use_mmap: bool = False) -> CompBinGraph:
    """Open a CompBin file (path, bytes-like, byte source or CachedFile).

    The header, file length and offsets monotonicity are checked here;
    neighbor IDs are not range-checked on decode (see ``convert.verify``).
    """
    if use_mmap and isinstance(source, (str, os.PathLike)):
        src = MmapSource(source)
    else:
        src = as_source(source)
    header = GraphHeader.unpack(bytes(src.read_at(0, HEADER_SIZE)))
    if src.size != header.file_size:
        raise FormatError(
            "length",
            f"file is {src.size} bytes, header implies {header.file_size}",
        )
    nv = header.vertex_count
    raw = src.read_at(HEADER_SIZE, OFFSET_WIDTH * (nv + 1))
    offsets = np.frombuffer(raw, dtype="<u8").astype(np.uint64, copy=True)
    if offsets[0] != 0:
        raise FormatError("offsets", f"offsets[0] is {int(offsets[0])}, expected 0")
    if offsets[-1] != header.edge_count:
        raise FormatError(
            "offsets", f"offsets[{nv}] is {int(offsets[-1])}, expected {header.edge_count}"
        )
    if nv and np.any(offsets[1:] < offsets[:-1]):
        bad = int(np.flatnonzero(offsets[1:] < offsets[:-1])[0]) + 1
        raise FormatError("offsets", f"offsets decrease at index {bad}")
    return CompBinGraph(header, offsets, src, header.neighbors_start)
