import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from compbin import cache, core
from compbin.loader import (EdgeBatch, GraphLoader, LoadMode, LoadRequest, LoadState,
                            collect_edges, iter_batches, load_range, load_whole, wait)

from conftest import edge_multiset, random_edges


def five_edge_graph():
    src = [0, 0, 1, 3, 3]
    dst = [1, 2, 3, 0, 2]
    return core.from_edges(src, dst, 4), (src, dst)


def test_five_edges_whole():
    g, (src, dst) = five_edge_graph()
    batches = []
    ticket = load_whole(g, lambda b: batches.append((b.sources(), b.neighbors.copy())))
    assert ticket.state is LoadState.DONE and ticket.edges_delivered == 5
    s = np.concatenate([b[0] for b in batches])
    d = np.concatenate([b[1] for b in batches])
    assert np.array_equal(edge_multiset(s, d), edge_multiset(src, dst))


def test_empty_range_and_empty_graph():
    g, _ = five_edge_graph()
    calls = []
    t = load_range(g, 2, 2, calls.append)
    assert t.done() and t.state is LoadState.DONE and not calls
    empty = core.from_edges([], [], 1)
    t = load_whole(empty, calls.append)
    assert t.state is LoadState.DONE and t.edges_delivered == 0 and not calls


def test_range_validation():
    g, _ = five_edge_graph()
    with pytest.raises(ValueError):
        LoadRequest(g, 3, 2)
    with pytest.raises(ValueError):
        LoadRequest(g, 0, 5)


def test_wait_semantics():
    g, _ = five_edge_graph()
    t = load_whole(g)
    assert wait(t) is LoadState.DONE
    assert wait(t) is LoadState.DONE


def test_non_blocking_million_edges(rng):
    src, dst = random_edges(rng, 1000, 1_000_000)
    g = core.from_edges(src, dst, 1000)
    counted = []
    t = load_whole(g, lambda b: counted.append(b.num_edges), mode=LoadMode.NON_BLOCKING,
                   buffer_capacity=1 << 14)
    assert wait(t) is LoadState.DONE
    assert t.edges_delivered == 1_000_000 == sum(counted)


def test_two_disjoint_ranges_equal_whole(rng):
    src, dst = random_edges(rng, 500, 4000)
    g = core.from_edges(src, dst, 500)
    whole = collect_edges(g)
    a = collect_edges(g, 0, 217)
    b = collect_edges(g, 217, 500)
    assert np.array_equal(np.concatenate([a[0], b[0]]), whole[0])
    assert np.array_equal(np.concatenate([a[1], b[1]]), whole[1])


def test_delivery_order_is_storage_order(rng):
    src, dst = random_edges(rng, 200, 3000)
    g = core.from_edges(src, dst, 200)
    s, d = collect_edges(g, buffer_capacity=37)
    gs, gd = g.to_arrays()
    assert np.array_equal(s, gs) and np.array_equal(d, gd)
    assert np.all(np.diff(s.astype(np.int64)) >= 0)


def test_split_large_vertex():
    src = [0] * 3 + [1] * 25 + [2] * 2
    dst = list(range(3)) + list(range(25)) + [0, 1]
    g = core.from_edges(src, dst, 30)
    batches = []

    def keep(b: EdgeBatch):
        assert b.num_edges <= 8
        batches.append((b.start_vertex, b.end_vertex, b.continues_previous, b.continues_next,
                        list(b.edges())))

    load_whole(g, keep, buffer_capacity=8)
    edges = [e for b in batches for e in b[4]]
    assert edges == list(zip(src, dst))
    # the tail of vertex 1 may share a batch with the vertices after it
    pieces = [b for b in batches if b[0] <= 1 < b[1]]
    assert len(pieces) == 4
    assert pieces[0][0] == 1 and pieces[0][3] and not pieces[0][2]
    assert all(p[2] and p[3] for p in pieces[1:-1])
    assert pieces[-1][0] == 1 and pieces[-1][2] and not pieces[-1][3]
    with pytest.raises(ValueError):
        LoadRequest(g, 0, 30, buffer_capacity=8, split_large_vertices=False)


def test_buffer_reused_between_batches(rng):
    src, dst = random_edges(rng, 50, 2000)
    g = core.from_edges(src, dst, 50)
    ids = set()
    load_whole(g, lambda b: ids.add(b.neighbors.__array_interface__["data"][0]),
               buffer_capacity=128)
    assert len(ids) == 1


def test_no_group_split_by_batches(rng):
    src, dst = random_edges(rng, 70_000, 5000)
    g = core.from_edges(src, dst, 70_000)
    assert g.bytes_per_id == 3
    total = 0
    for v0, v1, e0, e1, _, _ in iter_batches(g, 0, 70_000, 100):
        assert 0 < e1 - e0 <= 100
        total += e1 - e0
    assert total == 5000


class BrokenSource:
    def __init__(self, inner, fail_at):
        self.inner, self.size, self.fail_at = inner, inner.size, fail_at

    def read_at(self, offset, length):
        if offset >= self.fail_at:
            raise OSError(5, "injected")
        return self.inner.read_at(offset, length)


@pytest.mark.parametrize("mode", [LoadMode.BLOCKING, LoadMode.NON_BLOCKING])
def test_io_failure_marks_ticket_failed(rng, mode):
    src, dst = random_edges(rng, 100, 1000)
    g = core.from_edges(src, dst, 100)
    broken = core.CompBinGraph(g.header, g.offsets, BrokenSource(g.source, 500), 0)
    seen, errors = [], []
    t = load_whole(broken, lambda b: seen.append(b.num_edges), mode=mode,
                   buffer_capacity=64, on_error=errors.append)
    assert wait(t) is LoadState.FAILED
    assert isinstance(t.error, OSError) and errors == [t.error]
    assert t.edges_delivered == sum(seen) < 1000
    with pytest.raises(OSError):
        t.raise_for_error()


def test_concurrent_tickets_serialise_callbacks(rng):
    src, dst = random_edges(rng, 3000, 60_000)
    g = core.from_edges(src, dst, 3000)
    active = {}
    overlap = []
    lock = threading.Lock()

    def make(tag):
        def cb(b):
            with lock:
                if active.get(tag):
                    overlap.append(tag)
                active[tag] = True
            b.neighbors.sum()
            with lock:
                active[tag] = False
        return cb

    with GraphLoader(max_workers=4) as loader:
        ts = [loader.load_range(LoadRequest(g, i * 750, (i + 1) * 750, LoadMode.NON_BLOCKING,
                                            make(i), buffer_capacity=256)) for i in range(4)]
        for t in ts:
            assert t.wait(30) is LoadState.DONE
    assert not overlap
    assert sum(t.edges_delivered for t in ts) == 60_000


def test_routing_equivalence(tmp_path, rng):
    src, dst = random_edges(rng, 10_000, 50_000)
    path = tmp_path / "g.cbin"
    core.save(core.from_edges(src, dst, 10_000), path)
    direct = collect_edges(core.open_compbin(path))
    mm = collect_edges(core.open_compbin(path, use_mmap=True))
    cf = cache.register(path, cache.CacheConfig(block_size=16384, memory_budget=65536))
    via_cache = collect_edges(core.open_compbin(cf))
    cf.unregister()
    for other in (mm, via_cache):
        assert np.array_equal(direct[0], other[0]) and np.array_equal(direct[1], other[1])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 399), max_size=15), st.integers(1, 300))
def test_any_partition_is_complete(cuts, capacity):
    rng = np.random.default_rng(len(cuts) * 1000 + capacity)
    src, dst = random_edges(rng, 400, 3000)
    g = core.from_edges(src, dst, 400)
    bounds = [0, *sorted(set(cuts)), 400]
    parts = [collect_edges(g, a, b, buffer_capacity=capacity) for a, b in zip(bounds, bounds[1:])]
    s = np.concatenate([p[0] for p in parts])
    d = np.concatenate([p[1] for p in parts])
    whole = collect_edges(g)
    assert np.array_equal(s, whole[0]) and np.array_equal(d, whole[1])


def test_million_vertex_whole_load():
    rng = np.random.default_rng(5)
    src, dst = random_edges(rng, 1_000_000, 2_000_000)
    g = core.from_edges(src, dst, 1_000_000)
    t = load_whole(g)
    assert t.edges_delivered == g.edge_count == 2_000_000
