"""Edge list ingestion, CompBin conversion, verification and statistics."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import core
from .core import GraphHeader, HEADER_SIZE, OFFSET_WIDTH
from .errors import FormatError, ParseError, VertexRangeError

GIB = 1 << 30
CHUNK_EDGES = 1 << 20

TEXT = "text"
BIN64 = "bin64"


@dataclass
class EdgeListSource:
    """An edge list on disk: ``text`` (two integers per line) or ``bin64``
    (pairs of little-endian u64)."""

    path: str | os.PathLike
    format: str = TEXT
    vertex_count: int | None = None
    chunk_edges: int = CHUNK_EDGES

    def __post_init__(self):
        if self.format not in (TEXT, BIN64):
            raise ValueError(f"unknown edge list format {self.format!r}")

    def chunks(self) -> Iterator[tuple[int, np.ndarray, np.ndarray, list[int] | None]]:
        """Yield (first_record, src, dst, line_numbers) chunks.

        ``line_numbers`` maps each record to its 1-based text line and is
        None for binary input.
        """
        if self.format == BIN64:
            yield from self._binary_chunks()
        else:
            yield from self._text_chunks()

    def _binary_chunks(self):
        size = os.path.getsize(self.path)
        if size % 16:
            raise ParseError(f"{self.path}@{size - size % 16}",
                             "trailing bytes do not form a whole (u64, u64) record")
        record = 0
        with open(self.path, "rb") as f:
            while True:
                raw = f.read(16 * self.chunk_edges)
                if not raw:
                    break
                pairs = np.frombuffer(raw, dtype="<u8").reshape(-1, 2)
                yield record, pairs[:, 0].astype(np.uint64), pairs[:, 1].astype(np.uint64), None
                record += len(pairs)

    def _text_chunks(self):
        src: list[int] = []
        dst: list[int] = []
        lines: list[int] = []
        record = 0
        with open(self.path, "r", encoding="ascii", errors="replace") as f:
            for lineno, line in enumerate(f, 1):
                fields = line.split()
                if not fields or fields[0].startswith("#"):
                    continue
                if len(fields) != 2 or not (fields[0].isdigit() and fields[1].isdigit()):
                    raise ParseError(f"{self.path}:{lineno}",
                                     f"expected two non-negative integers, got {line.strip()!r}")
                s, d = int(fields[0]), int(fields[1])
                if s >> 64 or d >> 64:
                    raise ParseError(f"{self.path}:{lineno}", "vertex ID exceeds 64 bits")
                src.append(s)
                dst.append(d)
                lines.append(lineno)
                if len(src) == self.chunk_edges:
                    yield record, np.array(src, np.uint64), np.array(dst, np.uint64), lines
                    record += len(src)
                    src, dst, lines = [], [], []
        if src:
            yield record, np.array(src, np.uint64), np.array(dst, np.uint64), lines


def read_edges(source: EdgeListSource) -> tuple[np.ndarray, np.ndarray]:
    parts = [(s, d) for _, s, d, _ in source.chunks()]
    if not parts:
        return np.empty(0, np.uint64), np.empty(0, np.uint64)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def write_edges(path, src, dst, format: str = TEXT) -> None:
    src = np.asarray(src, dtype=np.uint64)
    dst = np.asarray(dst, dtype=np.uint64)
    if format == BIN64:
        np.stack([src, dst], axis=1).astype("<u8").tofile(path)
        return
    with open(path, "w") as f:
        for i in range(0, len(src), CHUNK_EDGES):
            s, d = src[i : i + CHUNK_EDGES].tolist(), dst[i : i + CHUNK_EDGES].tolist()
            f.write("".join(f"{a} {b}\n" for a, b in zip(s, d)))


def _locate(source: EdgeListSource, first: int, lines, index: int) -> str:
    if lines is not None:
        return f"{os.fspath(source.path)}:{lines[index]}"
    return f"{os.fspath(source.path)}#record {first + index}"


def convert(source: EdgeListSource, out, *, sort_neighbors: bool = False,
            vertex_count: int | None = None) -> GraphHeader:
    """Two-pass conversion of an edge list into a CompBin file.

    Pass one counts out-degrees (and the largest ID when the vertex count
    is inferred); pass two places each edge's encoded destination into its
    slot. Memory use is O(|V|) plus one chunk, except with
    ``sort_neighbors`` which sorts the neighbors section in memory.
    """
    vertex_count = vertex_count if vertex_count is not None else source.vertex_count
    degrees = np.zeros(vertex_count or 0, dtype=np.uint64)
    max_id = -1
    edge_count = 0
    for first, src, dst, lines in source.chunks():
        if not len(src):
            continue
        if vertex_count is not None:
            bad = np.flatnonzero((src >= vertex_count) | (dst >= vertex_count))
            if bad.size:
                i = int(bad[0])
                vertex = int(max(src[i], dst[i]))
                raise VertexRangeError(_locate(source, first, lines, i), vertex, vertex_count)
        hi = int(max(src.max(), dst.max()))
        if hi >= len(degrees):
            degrees = np.concatenate([degrees, np.zeros(hi + 1 - len(degrees), np.uint64)])
        max_id = max(max_id, hi)
        degrees += np.bincount(src.astype(np.intp), minlength=len(degrees)).astype(np.uint64)
        edge_count += len(src)
    if vertex_count is None:
        vertex_count = max(max_id + 1, 1)
        degrees = degrees[:vertex_count]
        if len(degrees) < vertex_count:
            degrees = np.zeros(vertex_count, np.uint64)
    header = GraphHeader.for_graph(vertex_count, edge_count)
    b = header.bytes_per_id
    offsets = core.build_offsets(degrees)

    with open(out, "wb") as f:
        f.write(header.pack())
        f.write(offsets.astype("<u8").tobytes())
        f.truncate(header.file_size)
    if edge_count == 0:
        return header

    nbrs = np.memmap(out, dtype=np.uint8, mode="r+", offset=header.neighbors_start,
                     shape=(edge_count, b))
    cursor = offsets[:-1].copy()
    for _, src, dst, _ in source.chunks():
        slots, targets = core.place_edges(src, dst, cursor)
        nbrs[slots.astype(np.intp)] = core.encode_ids(targets, b)
    if sort_neighbors:
        ids = core.decode_ids(np.asarray(nbrs).reshape(-1), b)
        nbrs[:] = core.encode_ids(core.sort_within_vertices(offsets, ids), b)
    nbrs.flush()
    del nbrs
    return header


@dataclass
class Issue:
    field: str
    byte_offset: int
    message: str

    def __str__(self):
        return f"{self.field} @ byte {self.byte_offset}: {self.message}"


@dataclass
class VerifyReport:
    path: str
    header: GraphHeader | None = None
    issues: list[Issue] = field(default_factory=list)
    # cap on per-kind issues so a garbage file does not produce a huge report
    limit: int = 1000

    @property
    def ok(self) -> bool:
        return not self.issues

    def add(self, field_name, offset, message):
        if sum(1 for i in self.issues if i.field == field_name) < self.limit:
            self.issues.append(Issue(field_name, offset, message))

    def lines(self) -> list[str]:
        if self.ok:
            return [f"{self.path}: OK"]
        return [f"{self.path}: {issue}" for issue in self.issues]


def verify(path, limit: int = 1000) -> VerifyReport:
    """Check every structural invariant of a CompBin file.

    Unlike :func:`compbin.core.open_compbin`, this also range-checks every
    neighbor ID and keeps going after the first failure.
    """
    path = os.fspath(path)
    report = VerifyReport(path, limit=limit)
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        raw = f.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        report.add("header", len(raw), f"file too short for a {HEADER_SIZE}-byte header")
        return report
    magic, version, b, reserved, nv, ne = core.HEADER_STRUCT.unpack(raw)
    if magic != core.MAGIC:
        report.add("magic", 0, f"expected {core.MAGIC!r}, found {magic!r}")
    if version != core.VERSION:
        report.add("version", 4, f"unsupported version {version}")
    if reserved != 0:
        report.add("reserved", 7, f"must be 0, found {reserved}")
    if nv < 1:
        report.add("vertex_count", 8, "must be >= 1")
        return report
    if b != core.bytes_per_id(nv):
        report.add("bytes_per_id", 6, f"{b} but {nv} vertices need {core.bytes_per_id(nv)}")
    if not report.ok:
        return report
    header = GraphHeader(nv, ne, b, version, magic)
    report.header = header
    if size != header.file_size:
        report.add("length", size, f"file is {size} bytes, header implies {header.file_size}")

    offsets_bytes = OFFSET_WIDTH * (nv + 1)
    available = max(0, min(nv + 1, (size - HEADER_SIZE) // OFFSET_WIDTH))
    if available < nv + 1:
        report.add("offsets", HEADER_SIZE + available * OFFSET_WIDTH, "offsets section truncated")
        return report
    offsets = np.fromfile(path, dtype="<u8", count=nv + 1, offset=HEADER_SIZE)
    if offsets[0] != 0:
        report.add("offsets", HEADER_SIZE, f"offsets[0] is {int(offsets[0])}, expected 0")
    if offsets[-1] != ne:
        report.add("offsets", HEADER_SIZE + nv * OFFSET_WIDTH,
                   f"offsets[{nv}] is {int(offsets[-1])}, expected {ne}")
    for i in np.flatnonzero(offsets[1:] < offsets[:-1])[:limit].tolist():
        report.add("offsets", HEADER_SIZE + (i + 1) * OFFSET_WIDTH,
                   f"offsets[{i + 1}] = {int(offsets[i + 1])} < offsets[{i}] = {int(offsets[i])}")

    start = HEADER_SIZE + offsets_bytes
    whole = max(0, min(ne, (size - start) // b))
    if whole:
        nbrs = np.memmap(path, dtype=np.uint8, mode="r", offset=start, shape=(whole * b,))
        step = CHUNK_EDGES
        for e0 in range(0, whole, step):
            e1 = min(e0 + step, whole)
            ids = core.decode_ids(nbrs[e0 * b : e1 * b], b)
            for j in np.flatnonzero(ids >= nv)[:limit].tolist():
                report.add("neighbors", start + (e0 + j) * b,
                           f"edge {e0 + j} encodes vertex {int(ids[j])} >= {nv}")
        del nbrs
    return report


def stats(path) -> dict[str, int | float]:
    """Shape, size and degree summary; raises FormatError on a bad header."""
    path = os.fspath(path)
    with open(path, "rb") as f:
        header = GraphHeader.unpack(f.read(HEADER_SIZE))
    size = os.path.getsize(path)
    nv = header.vertex_count
    if size < header.neighbors_start:
        raise FormatError("length", f"file is {size} bytes, too short for {nv + 1} offsets")
    offsets = np.fromfile(path, dtype="<u8", count=nv + 1, offset=HEADER_SIZE)
    degrees = np.diff(offsets.astype(np.int64))
    predicted = header.file_size
    return {
        "vertices": nv,
        "edges": header.edge_count,
        "bytes_per_id": header.bytes_per_id,
        "file_bytes": size,
        "file_gib": size / GIB,
        "predicted_bytes": predicted,
        "predicted_gib": predicted / GIB,
        "min_degree": int(degrees.min()),
        "max_degree": int(degrees.max()),
        "mean_degree": header.edge_count / nv,
    }
