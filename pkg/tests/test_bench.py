import csv
import io

import numpy as np
import pytest

from compbin import bench
from compbin.bench import (RANDOM_PARTITION, REPEATED_RANDOM_READS, RMAT, SEQUENTIAL_SCAN,
                           UNIFORM, Metrics, Workload, generate, report, run)
from compbin.cache import CacheConfig
from compbin.convert import EdgeListSource, convert

KiB, MiB = 1024, 1 << 20


def test_uniform_range_and_count(tmp_path):
    src, dst = generate(UNIFORM, 10, 20, seed=1)
    assert len(src) == len(dst) == 20
    assert int(max(src.max(), dst.max())) < 10


@pytest.mark.parametrize("model", [UNIFORM, RMAT])
def test_generate_deterministic(tmp_path, model):
    a, b = tmp_path / "a", tmp_path / "b"
    generate(model, 1000, 5000, seed=3, out=a)
    generate(model, 1000, 5000, seed=3, out=b)
    assert a.read_bytes() == b.read_bytes()
    generate(model, 1000, 5000, seed=4, out=b)
    assert a.read_bytes() != b.read_bytes()
    # output feeds the converter
    h = convert(EdgeListSource(a), tmp_path / "g")
    assert h.edge_count == 5000


def test_rmat_heavier_tail_than_uniform():
    n, m = 1 << 16, 1 << 20
    for seed in range(5):
        rs, _ = generate(RMAT, n, m, seed)
        us, _ = generate(UNIFORM, n, m, seed)
        rmax = np.bincount(rs.astype(np.intp), minlength=n).max()
        umax = np.bincount(us.astype(np.intp), minlength=n).max()
        assert rmax > umax


def test_rmat_respects_non_power_of_two_vertices():
    s, d = generate(RMAT, 1000, 20_000, seed=9)
    assert int(max(s.max(), d.max())) < 1000


def test_generate_rejects_bad_args():
    with pytest.raises(ValueError):
        generate(UNIFORM, 0, 5, 1)
    with pytest.raises(ValueError):
        generate("smallworld", 5, 5, 1)


@pytest.fixture
def blob(small_file):
    return small_file(8 * MiB + 4321)


def test_sequential_scan_counters(blob):
    size = blob.stat().st_size
    cfg = CacheConfig(block_size=1 * MiB, memory_budget=16 * MiB)
    on = run(Workload(SEQUENTIAL_SCAN, str(blob), True, cfg, repetitions=3))
    off = run(Workload(SEQUENTIAL_SCAN, str(blob), False, repetitions=3))
    nblocks = -(-size // MiB)
    nreq = -(-size // (128 * KiB))
    assert on.backing_reads == [nblocks, 0, 0]
    assert off.backing_reads == [nreq] * 3
    assert on.bytes_delivered == off.bytes_delivered == [size] * 3
    rates = [h / (h + r) for h, r in zip(np.cumsum(on.cache_hits), np.cumsum(on.backing_reads))]
    assert rates[0] < rates[1] < rates[2]


def test_repeated_random_reads_warm(blob):
    cfg = CacheConfig(block_size=1 * MiB, memory_budget=16 * MiB)
    w = Workload(REPEATED_RANDOM_READS, str(blob), True, cfg, repetitions=2, seed=5,
                 reads=1000, read_size=64 * KiB)
    m = run(w)
    assert m.backing_reads[1] == 0
    assert m.bytes_delivered == [1000 * 64 * KiB] * 2
    again = run(w)
    assert again.backing_reads == m.backing_reads and again.cache_hits == m.cache_hits


def test_random_partition_workload(tmp_path):
    edges = tmp_path / "e"
    generate(RMAT, 5000, 50_000, 2, edges)
    graph = tmp_path / "g"
    h = convert(EdgeListSource(edges), graph)
    cfg = CacheConfig(block_size=64 * KiB, memory_budget=4 * MiB)
    on = run(Workload(RANDOM_PARTITION, str(graph), True, cfg, repetitions=2, seed=11))
    off = run(Workload(RANDOM_PARTITION, str(graph), False, repetitions=2, seed=11))
    assert on.bytes_delivered == off.bytes_delivered == [h.edge_count * h.bytes_per_id] * 2
    assert on.backing_reads[1] == 0


def test_missing_graph():
    with pytest.raises(FileNotFoundError):
        run(Workload(SEQUENTIAL_SCAN, "/nonexistent/graph"))


def test_workload_validation():
    with pytest.raises(ValueError):
        Workload("zigzag", "x")
    with pytest.raises(ValueError):
        Workload(SEQUENTIAL_SCAN, "x", repetitions=0)


def _rec(cache, wall, **kw):
    base = dict(workload=SEQUENTIAL_SCAN, graph="g", cache=cache, block_size=MiB if cache else 0,
                budget=4 * MiB if cache else 0, reps=2, seed=0, request_size=128 * KiB,
                reads=1000, read_size=64 * KiB, threads=1, wall_s=wall, backing_reads=[4, 0],
                cache_hits=[10, 14], evictions=[0, 0], bytes_delivered=[1, 1])
    base.update(kw)
    return Metrics(**base)


def test_report_columns_and_speedup():
    text = report([_rec(False, [0.4, 0.6]), _rec(True, [0.1, 0.1])])
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["workload", "cache", "block_size", "budget", "reps", "wall_ms_median",
                       "backing_reads", "cache_hits", "evictions", "speedup_vs_baseline"]
    assert rows[1][1] == "off" and rows[1][9] == ""
    assert float(rows[2][9]) == pytest.approx(500 / 100)
    single = list(csv.reader(io.StringIO(report([_rec(True, [0.1])]))))
    assert single[1][9] == ""
    with pytest.raises(ValueError):
        report([])


def test_block_size_sweep_monotone(blob, tmp_path):
    records = [run(Workload(SEQUENTIAL_SCAN, str(blob), True,
                            CacheConfig(bs * MiB, 32 * MiB))) for bs in (1, 4, 32)]
    rows = list(csv.DictReader(io.StringIO(report(records))))
    assert len(rows) == 3
    reads = [int(r["backing_reads"]) for r in rows]
    assert reads[0] > reads[1] > reads[2] == 1


def test_small_block_amplification(small_file):
    path = small_file(64 * MiB)
    on = run(Workload(SEQUENTIAL_SCAN, str(path), True, CacheConfig(32 * MiB, 64 * MiB)))
    off = run(Workload(SEQUENTIAL_SCAN, str(path), False))
    assert on.backing_reads == [2]
    assert off.backing_reads == [512]
    assert off.backing_reads[0] // on.backing_reads[0] == 256


def test_metrics_json_round_trip():
    r = _rec(True, [0.1, 0.2])
    assert Metrics.from_json(r.to_json()) == r
    assert r.wall_ms == pytest.approx((100.0, 150.0, 200.0))


def test_threaded_reads_counters_deterministic(blob):
    cfg = CacheConfig(block_size=1 * MiB, memory_budget=16 * MiB)
    w = Workload(REPEATED_RANDOM_READS, str(blob), True, cfg, repetitions=2, seed=1,
                 reads=400, threads=4)
    a, b = run(w), run(w)
    assert a.backing_reads == b.backing_reads
    assert a.bytes_delivered == b.bytes_delivered


def test_cli_end_to_end(tmp_path, capsys):
    edges = tmp_path / "e.txt"
    assert bench.main(["generate", "--model", "uniform", "--vertices", "300", "--edges", "4000",
                       "--seed", "1", "--out", str(edges)]) == 0
    graph = tmp_path / "g"
    convert(EdgeListSource(edges), graph)
    js = tmp_path / "r.jsonl"
    assert bench.main(["run", "--graph", str(graph), "--reps", "2", "--block-size", "4K",
                       "--block-size", "64K", "--request-size", "1K", "--json", str(js)]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["cache"] for r in rows] == ["off", "on", "on"]
    assert all(r["speedup_vs_baseline"] for r in rows[1:])
    out = tmp_path / "merged.csv"
    assert bench.main(["report", str(js), "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 4
