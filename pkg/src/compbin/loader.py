"""Whole-graph and partition loading with blocking or non-blocking delivery.

Edges reach the caller through a callback that receives :class:`EdgeBatch`
objects. A batch covers a run of consecutive vertices and is backed by
buffers owned by the ticket: they are reused for the next batch, so copy
anything you need to keep.
"""
from __future__ import annotations

import enum
import itertools
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .core import CompBinGraph

log = logging.getLogger(__name__)

DEFAULT_BUFFER_CAPACITY = 1 << 16


class LoadMode(enum.Enum):
    BLOCKING = "blocking"
    NON_BLOCKING = "non-blocking"


class LoadState(enum.Enum):
    PENDING = "pending"
    DONE = "done"
    FAILED = "failed"


@dataclass
class EdgeBatch:
    """Neighbors of vertices ``[start_vertex, end_vertex)``.

    ``offsets`` has one entry per vertex plus one and indexes into
    ``neighbors``. When a vertex has more edges than the buffer holds it is
    split across batches: ``continues_previous`` says the first vertex began
    in an earlier batch, ``continues_next`` that the last vertex goes on in
    the next one.
    """

    start_vertex: int
    end_vertex: int
    offsets: np.ndarray
    neighbors: np.ndarray
    continues_previous: bool = False
    continues_next: bool = False

    @property
    def num_edges(self) -> int:
        return len(self.neighbors)

    def __iter__(self) -> Iterator[tuple[int, np.ndarray]]:
        for i, v in enumerate(range(self.start_vertex, self.end_vertex)):
            yield v, self.neighbors[self.offsets[i] : self.offsets[i + 1]]

    def edges(self) -> Iterator[tuple[int, int]]:
        for v, nbrs in self:
            for u in nbrs.tolist():
                yield v, u

    def sources(self) -> np.ndarray:
        counts = np.diff(self.offsets)
        return np.repeat(np.arange(self.start_vertex, self.end_vertex, dtype=np.uint64), counts)


Callback = Callable[[EdgeBatch], None]


@dataclass
class LoadRequest:
    graph: CompBinGraph
    start: int = 0
    end: int | None = None
    mode: LoadMode = LoadMode.BLOCKING
    callback: Callback | None = None
    buffer_capacity: int = DEFAULT_BUFFER_CAPACITY
    # deliver a vertex larger than the buffer in several batches
    split_large_vertices: bool = True
    on_error: Callable[[BaseException], None] | None = None

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = LoadMode(self.mode)
        if self.end is None:
            self.end = self.graph.vertex_count
        if not 0 <= self.start <= self.end <= self.graph.vertex_count:
            raise ValueError(
                f"vertex range [{self.start}, {self.end}) outside [0, {self.graph.vertex_count}]"
            )
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be positive")
        if not self.split_large_vertices and self.end > self.start:
            degrees = np.diff(self.graph.offsets[self.start : self.end + 1])
            widest = int(degrees.max())
            if widest > self.buffer_capacity:
                raise ValueError(
                    f"a vertex in range has degree {widest} > buffer_capacity "
                    f"{self.buffer_capacity}; enable split_large_vertices"
                )


_ticket_ids = itertools.count(1)


@dataclass
class LoadTicket:
    request: LoadRequest
    id: int = field(default_factory=lambda: next(_ticket_ids))
    state: LoadState = LoadState.PENDING
    edges_delivered: int = 0
    batches_delivered: int = 0
    error: BaseException | None = None
    _done: threading.Event = field(default_factory=threading.Event, repr=False)

    def wait(self, timeout: float | None = None) -> LoadState:
        self._done.wait(timeout)
        return self.state

    def done(self) -> bool:
        return self._done.is_set()

    def raise_for_error(self):
        if self.state is LoadState.FAILED:
            raise self.error

    def _finish(self, state: LoadState, error: BaseException | None = None):
        self.error = error
        self.state = state
        self._done.set()


def iter_batches(graph: CompBinGraph, start: int, end: int,
                 capacity: int) -> Iterator[tuple[int, int, int, int, bool, bool]]:
    """Plan deliveries as (first_vertex, last_vertex, first_edge, last_edge, cont_prev, cont_next).

    Whole vertices are packed greedily up to ``capacity`` edges; a vertex
    that cannot fit on its own is cut into capacity-sized pieces.
    """
    offsets = graph.offsets
    v = start
    e = int(offsets[start])
    stop_edge = int(offsets[end])
    while e < stop_edge:
        w = min(int(np.searchsorted(offsets, e + capacity, side="right")) - 1, end)
        if w > v:
            last = int(offsets[w])
            if last > e:
                yield v, w, e, last, e > int(offsets[v]), False
            v, e = w, last
            continue
        # vertex v alone overflows the buffer: cut it
        yield v, v + 1, e, e + capacity, e > int(offsets[v]), True
        e += capacity


def _run(ticket: LoadTicket):
    req = ticket.request
    graph = req.graph
    nbr_buf = np.empty(req.buffer_capacity, dtype=np.uint64)
    try:
        for v0, v1, e0, e1, prev, nxt in iter_batches(graph, req.start, req.end,
                                                      req.buffer_capacity):
            neighbors = graph.edge_slice(e0, e1, out=nbr_buf)
            local = graph.offsets[v0 : v1 + 1].astype(np.int64) - e0
            np.clip(local, 0, e1 - e0, out=local)
            if req.callback is not None:
                req.callback(EdgeBatch(v0, v1, local, neighbors, prev, nxt))
            ticket.edges_delivered += e1 - e0
            ticket.batches_delivered += 1
    except BaseException as exc:
        log.debug("load ticket %d failed: %s", ticket.id, exc)
        ticket._finish(LoadState.FAILED, exc)
        if req.on_error is not None:
            req.on_error(exc)
        return
    ticket._finish(LoadState.DONE)


class GraphLoader:
    """Runs non-blocking tickets on a shared worker pool, one worker per ticket."""

    def __init__(self, max_workers: int = 4):
        self._pool = ThreadPoolExecutor(max_workers=max_workers,
                                        thread_name_prefix="compbin-load")

    def load_range(self, request: LoadRequest) -> LoadTicket:
        ticket = LoadTicket(request)
        if request.mode is LoadMode.BLOCKING:
            _run(ticket)
        else:
            self._pool.submit(_run, ticket)
        return ticket

    def load_whole(self, graph: CompBinGraph, mode=LoadMode.BLOCKING,
                   callback: Callback | None = None, **kwargs) -> LoadTicket:
        return self.load_range(LoadRequest(graph, 0, graph.vertex_count, mode, callback,
                                           **kwargs))

    def shutdown(self, wait: bool = True):
        self._pool.shutdown(wait=wait)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


_default_loader: GraphLoader | None = None
_default_lock = threading.Lock()


def default_loader() -> GraphLoader:
    global _default_loader
    with _default_lock:
        if _default_loader is None:
            _default_loader = GraphLoader()
        return _default_loader


def load_range(graph: CompBinGraph, start: int, end: int, callback: Callback | None = None,
               mode=LoadMode.BLOCKING, **kwargs) -> LoadTicket:
    return default_loader().load_range(LoadRequest(graph, start, end, mode, callback, **kwargs))


def load_whole(graph: CompBinGraph, callback: Callback | None = None,
               mode=LoadMode.BLOCKING, **kwargs) -> LoadTicket:
    return default_loader().load_whole(graph, mode, callback, **kwargs)


def wait(ticket: LoadTicket, timeout: float | None = None) -> LoadState:
    return ticket.wait(timeout)


def collect_edges(graph: CompBinGraph, start: int = 0, end: int | None = None,
                  **kwargs) -> tuple[np.ndarray, np.ndarray]:
    """Blocking load of a range into (sources, destinations) arrays."""
    srcs, dsts = [], []

    def keep(batch: EdgeBatch):
        srcs.append(batch.sources())
        dsts.append(batch.neighbors.copy())

    end = graph.vertex_count if end is None else end
    ticket = load_range(graph, start, end, keep, **kwargs)
    ticket.raise_for_error()
    if not srcs:
        return np.empty(0, dtype=np.uint64), np.empty(0, dtype=np.uint64)
    return np.concatenate(srcs), np.concatenate(dsts)
