"""Closed-form latency surrogate for a GEMM on a PE array with one shared buffer.

Everything is integer arithmetic so results are bit-identical across platforms.
The buffer is split evenly between the A, B and C tiles; the tile side is the
largest ``t`` with ``3 t^2 <= buf``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .space import Dataflow, DesignSpace, HardwareConfig, Workload


@dataclass(frozen=True)
class CostParams:
    bandwidth: int = 16  # elements per cycle

    def __post_init__(self):
        if int(self.bandwidth) < 1:
            raise ValueError("bandwidth must be >= 1")

    def to_dict(self) -> dict:
        return {"bandwidth": self.bandwidth}

    @classmethod
    def from_dict(cls, d: dict) -> "CostParams":
        return cls(bandwidth=int(d["bandwidth"]))


def _ceil_div(a, b):
    return -(-a // b)


def tile_dim(buf: int) -> int:
    if buf < 1:
        raise ValueError("buf must be >= 1")
    return max(1, math.isqrt(buf // 3))


def traffic(w: Workload, t: int) -> int:
    """Total elements moved between memory and buffer for tile side ``t``."""
    if t < 1:
        raise ValueError("tile side must be >= 1")
    m, n, k = w.m, w.n, w.k
    n_m, n_n, n_k = _ceil_div(m, t), _ceil_div(n, t), _ceil_div(k, t)
    if w.dataflow == Dataflow.WS:
        return k * n + m * k * n_n + 2 * m * n * n_k
    if w.dataflow == Dataflow.OS:
        return m * n + m * k * n_n + k * n * n_m
    return m * k + k * n * n_m + 2 * m * n * n_k


def latency(w: Workload, cfg: HardwareConfig, p: CostParams = CostParams()) -> int:
    t = tile_dim(cfg.buf)
    effective_pe = min(cfg.pe, t * t)
    compute = _ceil_div(w.m * w.n * w.k, effective_pe)
    mem = _ceil_div(traffic(w, t), p.bandwidth)
    return max(compute, mem, 1)


def latency_grid(w: Workload, space: DesignSpace, p: CostParams = CostParams()) -> np.ndarray:
    """Latency of every config as an int64 array indexed ``[pe_index, buf_index]``.

    Same arithmetic as :func:`latency`, vectorized over the option ladders.
    """
    pe = np.asarray(space.pe_options, dtype=np.int64)
    t = np.array([tile_dim(b) for b in space.buf_options], dtype=np.int64)
    m, n, k = w.m, w.n, w.k
    n_m, n_n, n_k = _ceil_div(m, t), _ceil_div(n, t), _ceil_div(k, t)
    if w.dataflow == Dataflow.WS:
        tr = k * n + m * k * n_n + 2 * m * n * n_k
    elif w.dataflow == Dataflow.OS:
        tr = m * n + m * k * n_n + k * n * n_m
    else:
        tr = m * k + k * n * n_m + 2 * m * n * n_k
    mem = _ceil_div(tr, p.bandwidth)
    eff = np.minimum(pe[:, None], (t * t)[None, :])
    compute = _ceil_div(m * n * k, eff)
    return np.maximum(np.maximum(compute, mem[None, :]), 1)
