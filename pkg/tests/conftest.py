import os
import re
from collections import defaultdict

import numpy as np
import pytest

MiB = 1 << 20

_criteria: dict[str, list[tuple[str, str]]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, text): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = getattr(report, "_criterion", None)
    if marker is not None:
        _criteria[marker[0]].append((marker[1], report.outcome))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        report._criterion = (str(m.args[0]), m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_criteria, key=lambda c: (int(re.match(r"\d+", c).group()), c)):
        outcomes = [o for _, o in _criteria[cid]]
        text = _criteria[cid][0][0]
        verdict = "PASS" if all(o == "passed" for o in outcomes) else (
            "SKIP" if all(o == "skipped" for o in outcomes) else "FAIL")
        terminalreporter.write_line(f"criterion {cid:>3}: {verdict}  {text}")


def random_edges(rng, n_vertices, n_edges, src_vertices=None):
    src_hi = src_vertices or n_vertices
    src = rng.integers(0, src_hi, size=n_edges, dtype=np.uint64)
    dst = rng.integers(0, n_vertices, size=n_edges, dtype=np.uint64)
    return src, dst


def adjacency(src, dst):
    """Brute-force oracle: per-source neighbor lists in input order."""
    adj = defaultdict(list)
    for s, d in zip(np.asarray(src).tolist(), np.asarray(dst).tolist()):
        adj[s].append(d)
    return adj


def edge_multiset(src, dst):
    pairs = np.stack([np.asarray(src, np.uint64), np.asarray(dst, np.uint64)], axis=1)
    if len(pairs) == 0:
        return pairs
    return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_random_file(path, size, seed=7):
    rng = np.random.default_rng(seed)
    with open(path, "wb") as f:
        step = 64 * MiB
        for off in range(0, size, step):
            f.write(rng.integers(0, 256, size=min(step, size - off), dtype=np.uint8).tobytes())
    return path


@pytest.fixture(scope="session")
def file_256m(tmp_path_factory):
    return write_random_file(tmp_path_factory.mktemp("big") / "random256.bin", 256 * MiB)


@pytest.fixture(scope="session")
def file_100m(tmp_path_factory):
    return write_random_file(tmp_path_factory.mktemp("mid") / "random100.bin", 100 * MiB, seed=8)


@pytest.fixture
def small_file(tmp_path):
    def make(size, seed=3, name="data.bin"):
        return write_random_file(tmp_path / name, size, seed)
    return make


def fuse_mount_possible(tmp_path_factory) -> tuple[bool, str]:
    from compbin.fusefs import fuse_available, mount

    ok, why = fuse_available()
    if not ok:
        return ok, why
    d = tmp_path_factory.mktemp("probe")
    probe = d / "probe.bin"
    probe.write_bytes(b"x" * 10)
    mnt = d / "mnt"
    mnt.mkdir()
    try:
        mount([probe], mnt).unmount()
    except OSError as exc:
        return False, f"trial mount failed: {exc}"
    return True, ""


@pytest.fixture(scope="session")
def fuse_host(tmp_path_factory):
    ok, why = fuse_mount_possible(tmp_path_factory)
    if not ok:
        pytest.skip(f"no user-space filesystem facility: {why}")
    return True


def cpu_count():
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
