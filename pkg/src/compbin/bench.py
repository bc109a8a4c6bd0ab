"""Synthetic graph generation and cache on/off loading benchmarks.

Wall times depend on the OS page cache and are informational; the backing
read, hit and eviction counters are deterministic for a fixed seed and are
what the tests assert on.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import statistics
import sys
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cache import DEFAULT_BLOCK_SIZE, CacheConfig, register
from .convert import BIN64, TEXT, write_edges
from .core import open_compbin
from .loader import LoadMode, LoadRequest, default_loader
from .sources import CachedSource

UNIFORM = "uniform"
RMAT = "rmat"
RMAT_PARAMS = (0.57, 0.19, 0.19, 0.05)

SEQUENTIAL_SCAN = "sequential-scan"
RANDOM_PARTITION = "random-partition"
REPEATED_RANDOM_READS = "repeated-random-reads"
KINDS = (SEQUENTIAL_SCAN, RANDOM_PARTITION, REPEATED_RANDOM_READS)

REQUEST_SIZE = 128 * 1024

CSV_COLUMNS = ("workload", "cache", "block_size", "budget", "reps", "wall_ms_median",
               "backing_reads", "cache_hits", "evictions", "speedup_vs_baseline")


def uniform_edges(vertices: int, edges: int, rng: np.random.Generator):
    pairs = rng.integers(0, vertices, size=(edges, 2), dtype=np.uint64)
    return pairs[:, 0], pairs[:, 1]


def rmat_edges(vertices: int, edges: int, rng: np.random.Generator,
               params=RMAT_PARAMS):
    """Recursive-matrix edges; endpoints falling outside ``vertices`` are redrawn."""
    a, b, c, _ = params
    scale = max(1, (vertices - 1).bit_length())
    src = np.empty(0, np.uint64)
    dst = np.empty(0, np.uint64)
    while len(src) < edges:
        n = edges - len(src)
        s = np.zeros(n, np.uint64)
        d = np.zeros(n, np.uint64)
        for _ in range(scale):
            r = rng.random(n)
            s = (s << np.uint64(1)) | (r >= a + b).astype(np.uint64)
            d = (d << np.uint64(1)) | (((r >= a) & (r < a + b)) | (r >= a + b + c)).astype(np.uint64)
        keep = (s < vertices) & (d < vertices)
        src = np.concatenate([src, s[keep]])
        dst = np.concatenate([dst, d[keep]])
    return src[:edges], dst[:edges]


def generate(model: str, vertices: int, edges: int, seed: int, out=None,
             format: str = TEXT):
    """Deterministic synthetic edge list; written to ``out`` when given."""
    if vertices < 1 or edges < 0:
        raise ValueError("need vertices >= 1 and edges >= 0")
    rng = np.random.default_rng(seed)
    if model == UNIFORM:
        src, dst = uniform_edges(vertices, edges, rng)
    elif model == RMAT:
        src, dst = rmat_edges(vertices, edges, rng)
    else:
        raise ValueError(f"unknown model {model!r}")
    if out is not None:
        write_edges(out, src, dst, format)
    return src, dst


@dataclass
class Workload:
    kind: str
    graph: str
    cache: bool = True
    config: CacheConfig = field(default_factory=CacheConfig)
    repetitions: int = 1
    seed: int = 0
    request_size: int = REQUEST_SIZE
    reads: int = 1000
    read_size: int = 64 * 1024
    threads: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown workload kind {self.kind!r}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    def baseline_key(self):
        return (self.kind, os.fspath(self.graph), self.seed, self.request_size,
                self.reads, self.read_size, self.threads, self.repetitions)


@dataclass
class Metrics:
    workload: str
    graph: str
    cache: bool
    block_size: int
    budget: int
    reps: int
    seed: int
    request_size: int
    reads: int
    read_size: int
    threads: int
    wall_s: list[float] = field(default_factory=list)
    backing_reads: list[int] = field(default_factory=list)
    cache_hits: list[int] = field(default_factory=list)
    evictions: list[int] = field(default_factory=list)
    bytes_delivered: list[int] = field(default_factory=list)

    @property
    def wall_ms(self) -> tuple[float, float, float]:
        ms = [w * 1e3 for w in self.wall_s]
        return min(ms), statistics.median(ms), max(ms)

    def baseline_key(self):
        return (self.workload, self.graph, self.seed, self.request_size, self.reads,
                self.read_size, self.threads, self.reps)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> Metrics:
        return cls(**json.loads(line))


class CountingReader:
    """Uncached positioned reads, one backing call per request."""

    def __init__(self, path):
        self._fd = os.open(path, os.O_RDONLY)
        self.size = os.fstat(self._fd).st_size
        self.calls = 0
        self._lock = threading.Lock()

    def read(self, offset, length):
        with self._lock:
            self.calls += 1
        return os.pread(self._fd, length, offset)

    def read_at(self, offset, length):
        return self.read(offset, length)

    def close(self):
        os.close(self._fd)


def _split(items: list, parts: int) -> list[list]:
    return [items[i::parts] for i in range(parts)]


def _in_threads(jobs: list, fn) -> int:
    total = [0] * len(jobs)

    def work(i):
        total[i] = fn(jobs[i])

    if len(jobs) == 1:
        work(0)
    else:
        threads = [threading.Thread(target=work, args=(i,)) for i in range(len(jobs))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    return sum(total)


def _requests(w: Workload, size: int) -> list[tuple[int, int]]:
    if w.kind == SEQUENTIAL_SCAN:
        return [(off, min(w.request_size, size - off)) for off in range(0, size, w.request_size)]
    rng = np.random.default_rng(w.seed)
    span = max(1, size - w.read_size + 1)
    return [(int(off), w.read_size) for off in rng.integers(0, span, size=w.reads)]


def _partitions(w: Workload, vertex_count: int) -> list[tuple[int, int]]:
    rng = np.random.default_rng(w.seed)
    k = int(rng.integers(1, 17))
    cuts = np.unique(rng.integers(1, max(2, vertex_count), size=k - 1)) if vertex_count > 1 else []
    bounds = [0, *[int(c) for c in cuts], vertex_count]
    return list(zip(bounds[:-1], bounds[1:]))


def _one_pass(w: Workload, read, size) -> int:
    if w.kind == RANDOM_PARTITION:
        raise AssertionError("handled by _partition_pass")
    jobs = _split(_requests(w, size), w.threads)
    return _in_threads(jobs, lambda reqs: sum(len(read(off, n)) for off, n in reqs))


def _partition_pass(w: Workload, source) -> int:
    graph = open_compbin(source)
    b = graph.bytes_per_id
    ranges = _partitions(w, graph.vertex_count)
    mode = LoadMode.NON_BLOCKING if w.threads > 1 else LoadMode.BLOCKING
    tickets = [default_loader().load_range(LoadRequest(graph, s, e, mode)) for s, e in ranges]
    delivered = 0
    for t in tickets:
        t.wait()
        t.raise_for_error()
        delivered += t.edges_delivered * b
    return delivered


def run(w: Workload) -> Metrics:
    """Execute a workload ``repetitions`` times and collect per-repetition metrics."""
    if not os.path.exists(w.graph):
        raise FileNotFoundError(f"workload graph {w.graph} does not exist")
    m = Metrics(w.kind, os.fspath(w.graph), w.cache, w.config.block_size if w.cache else 0,
                w.config.memory_budget if w.cache else 0, w.repetitions, w.seed,
                w.request_size, w.reads, w.read_size, w.threads)
    if w.cache:
        cached = register(w.graph, w.config)
        source, size = CachedSource(cached), cached.length
        try:
            prev = cached.counters()
            for _ in range(w.repetitions):
                t0 = time.perf_counter()
                if w.kind == RANDOM_PARTITION:
                    delivered = _partition_pass(w, source)
                else:
                    delivered = _one_pass(w, cached.read, size)
                m.wall_s.append(time.perf_counter() - t0)
                now = cached.counters()
                m.backing_reads.append(now.backing_reads - prev.backing_reads)
                m.cache_hits.append(now.cache_hits - prev.cache_hits)
                m.evictions.append(now.evictions - prev.evictions)
                m.bytes_delivered.append(delivered)
                prev = now
        finally:
            cached.unregister()
        return m

    reader = CountingReader(w.graph)
    try:
        for _ in range(w.repetitions):
            before = reader.calls
            t0 = time.perf_counter()
            if w.kind == RANDOM_PARTITION:
                delivered = _partition_pass(w, reader)
            else:
                delivered = _one_pass(w, reader.read, reader.size)
            m.wall_s.append(time.perf_counter() - t0)
            m.backing_reads.append(reader.calls - before)
            m.cache_hits.append(0)
            m.evictions.append(0)
            m.bytes_delivered.append(delivered)
    finally:
        reader.close()
    return m


def report(records: list[Metrics], out=None) -> str:
    """Render records as CSV; cache-on rows get a speedup over a matching cache-off run."""
    if not records:
        raise ValueError("no records to report")
    baselines = {r.baseline_key(): r for r in records if not r.cache}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        median = r.wall_ms[1]
        speedup = ""
        base = baselines.get(r.baseline_key())
        if r.cache and base is not None and median > 0:
            speedup = f"{base.wall_ms[1] / median:.3f}"
        writer.writerow([r.workload, "on" if r.cache else "off", r.block_size, r.budget,
                         r.reps, f"{median:.3f}", sum(r.backing_reads), sum(r.cache_hits),
                         sum(r.evictions), speedup])
    text = buf.getvalue()
    if out is not None:
        with open(out, "w") as f:
            f.write(text)
    return text


def _size(text):
    from .cli import _size as parse
    return parse(text)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="compbin-bench")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic edge list")
    g.add_argument("--model", choices=[UNIFORM, RMAT], default=RMAT)
    g.add_argument("--vertices", type=int, required=True)
    g.add_argument("--edges", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--format", choices=[TEXT, BIN64], default=TEXT)
    g.add_argument("--out", required=True)

    r = sub.add_parser("run", help="run a workload with the cache on, off, or both")
    r.add_argument("--kind", choices=KINDS, default=SEQUENTIAL_SCAN)
    r.add_argument("--graph", required=True)
    r.add_argument("--cache", choices=["on", "off", "both"], default="both")
    r.add_argument("--block-size", type=_size, action="append",
                   help="repeat to sweep block sizes")
    r.add_argument("--budget", type=_size, default=None)
    r.add_argument("--reps", type=int, default=3)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--request-size", type=_size, default=REQUEST_SIZE)
    r.add_argument("--reads", type=int, default=1000)
    r.add_argument("--read-size", type=_size, default=64 * 1024)
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--json", help="also append raw records (JSON lines) here")
    r.add_argument("--out", help="CSV destination (default: stdout)")

    p = sub.add_parser("report", help="merge JSON-lines records into one CSV")
    p.add_argument("records", nargs="+")
    p.add_argument("--out")

    args = parser.parse_args(argv)
    if args.command == "generate":
        generate(args.model, args.vertices, args.edges, args.seed, args.out, args.format)
        return 0
    if args.command == "report":
        records = []
        for path in args.records:
            with open(path) as f:
                records += [Metrics.from_json(line) for line in f if line.strip()]
        text = report(records, args.out)
        if args.out is None:
            sys.stdout.write(text)
        return 0

    common = dict(kind=args.kind, graph=args.graph, repetitions=args.reps, seed=args.seed,
                  request_size=args.request_size, reads=args.reads,
                  read_size=args.read_size, threads=args.threads)
    records = []
    if args.cache in ("off", "both"):
        records.append(run(Workload(cache=False, **common)))
    if args.cache in ("on", "both"):
        for bs in args.block_size or [DEFAULT_BLOCK_SIZE]:
            budget = args.budget or max(bs, os.path.getsize(args.graph))
            records.append(run(Workload(cache=True, config=CacheConfig(bs, budget), **common)))
    if args.json:
        with open(args.json, "a") as f:
            for rec in records:
                f.write(rec.to_json() + "\n")
    text = report(records, args.out)
    if args.out is None:
        sys.stdout.write(text)
    return 0


def entry():
    sys.exit(main())
