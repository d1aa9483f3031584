import math
import random

import pytest

from uovdse.costmodel import CostParams, latency, latency_grid, tile_dim, traffic
from uovdse.oracle import sample_workload, solve
from uovdse.space import Dataflow, HardwareConfig, Workload, default_space

import numpy as np


def _tile_by_search(buf):
    t = 1
    while 3 * (t + 1) ** 2 <= buf:
        t += 1
    return t


@pytest.mark.parametrize("buf,t", [(48, 4), (1, 1), (256, 9)])
def test_tile_dim_examples(buf, t):
    assert tile_dim(buf) == t


def test_tile_dim_matches_search():
    for buf in list(range(1, 5000)) + list(default_space().buf_options):
        assert tile_dim(buf) == _tile_by_search(buf)


def test_traffic_examples():
    w = lambda df: Workload(4, 4, 4, df)
    assert traffic(w(Dataflow.WS), 4) == 64
    assert traffic(w(Dataflow.OS), 4) == 48
    assert traffic(w(Dataflow.OS), 2) == 80


def test_latency_examples():
    p = CostParams(16)
    assert latency(Workload(4, 4, 4, Dataflow.WS), HardwareConfig(16, 48), p) == 4
    assert latency(Workload(4, 4, 4, Dataflow.OS), HardwareConfig(4, 12), p) == 16
    for df in Dataflow:
        assert latency(Workload(1, 1, 1, df), HardwareConfig(2, 256), p) == 1


def test_grid_matches_scalar():
    s = default_space()
    rng = np.random.default_rng(5)
    for _ in range(20):
        w = sample_workload(rng)
        grid = latency_grid(w, s)
        for i, pe in enumerate(s.pe_options[::7]):
            for j, buf in enumerate(s.buf_options):
                assert grid[i * 7, j] == latency(w, HardwareConfig(pe, buf))


def test_monotone_in_adjacent_options():
    s = default_space()
    rng = np.random.default_rng(17)
    pick = random.Random(17)
    for _ in range(10_000):
        w = sample_workload(rng)
        i = pick.randrange(63)
        j = pick.randrange(12)
        lo = latency(w, HardwareConfig(s.pe_options[i], s.buf_options[j]))
        assert latency(w, HardwareConfig(s.pe_options[i + 1], s.buf_options[j])) <= lo
        j = pick.randrange(11)
        pe = s.pe_options[pick.randrange(64)]
        assert latency(w, HardwareConfig(pe, s.buf_options[j + 1])) <= latency(w, HardwareConfig(pe, s.buf_options[j]))


def test_output_stationary_never_moves_more_data():
    # OS writes C once, WS/RS read+write partial sums, so OS weakly dominates
    rng = np.random.default_rng(23)
    for _ in range(1000):
        w = sample_workload(rng)
        for t in (1, 4, 9, 26, 104, 418):
            tr = {df: traffic(Workload(w.m, w.n, w.k, df), t) for df in Dataflow}
            assert tr[Dataflow.OS] <= min(tr[Dataflow.WS], tr[Dataflow.RS])


def test_dataflow_shifts_the_optimal_config():
    rng = np.random.default_rng(23)
    space = default_space()
    shifted = 0
    for _ in range(1000):
        w = sample_workload(rng)
        optima = {solve(Workload(w.m, w.n, w.k, df), space)[0] for df in Dataflow}
        shifted += len(optima) > 1
    assert shifted >= 500


def test_bandwidth_validation():
    with pytest.raises(ValueError):
        CostParams(0)


def test_deterministic():
    w = Workload(200, 1500, 999, Dataflow.RS)
    cfg = HardwareConfig(66, 4096)
    assert {latency(w, cfg) for _ in range(5)} == {latency(w, cfg)}
