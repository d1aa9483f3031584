"""Unified ordinal vectors over spacing-increasing (log-space) buckets.

A design value ``d`` is first warped to bucket coordinates ``s`` in ``[0, k]``
where the bucket edges land on the integers. Entry ``i`` of the ordinal vector
is ``1 - exp(-(s - i))`` for every edge at or below ``s`` and zero above it.
Working in warped units keeps every distance below ``k``, so ``1 - o[i]`` stays
well above double-precision epsilon and the encoding remains invertible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Entry i is treated as "resolved" once its warped distance exceeds one bucket.
_RESOLVED = 1.0 - math.exp(-1.0)


@dataclass(frozen=True)
class BucketSpec:
    lo: float
    hi: float
    k: int

    def __post_init__(self):
        if not (self.lo > 0):
            raise ValueError(f"lo must be > 0, got {self.lo}")
        if not (self.hi > self.lo):
            raise ValueError(f"hi must be > lo, got lo={self.lo} hi={self.hi}")
        if int(self.k) < 1:
            raise ValueError("k must be >= 1")

    @property
    def edges(self) -> np.ndarray:
        i = np.arange(self.k + 1)
        e = np.exp(math.log(self.lo) + (i / self.k) * (math.log(self.hi) - math.log(self.lo)))
        e[0], e[-1] = self.lo, self.hi
        return e

    @property
    def _log_span(self) -> float:
        return math.log(self.hi) - math.log(self.lo)

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "k": self.k}

    @classmethod
    def from_dict(cls, d: dict) -> "BucketSpec":
        return cls(float(d["lo"]), float(d["hi"]), int(d["k"]))


def make_buckets(lo: float, hi: float, k: int) -> BucketSpec:
    return BucketSpec(float(lo), float(hi), int(k))


def warp(d: float, spec: BucketSpec) -> tuple[float, bool]:
    """Map ``d`` to bucket coordinates. Returns ``(s, clamped)``."""
    clamped = not (spec.lo <= d <= spec.hi)
    d = min(max(d, spec.lo), spec.hi)
    return spec.k * (math.log(d) - math.log(spec.lo)) / spec._log_span, clamped


def unwarp(s: float, spec: BucketSpec) -> float:
    s = min(max(s, 0.0), float(spec.k))
    return math.exp(math.log(spec.lo) + s * spec._log_span / spec.k)


def encode(d: float, spec: BucketSpec) -> np.ndarray:
    s, _ = warp(d, spec)
    return encode_warped(np.array([s]), spec.k)[0]


def encode_warped(s: np.ndarray, k: int) -> np.ndarray:
    """Vectorized encoder over already-warped values; returns shape ``(len(s), k)``."""
    s = np.asarray(s, dtype=np.float64)[:, None]
    i = np.arange(k, dtype=np.float64)[None, :]
    dist = s - i
    return np.where(dist >= 0, -np.expm1(-np.maximum(dist, 0.0)), 0.0)


def select_index(o: np.ndarray) -> np.ndarray:
    """Entry used to regress the value back out of an ordinal vector.

    The last entry whose implied distance exceeds one bucket, i.e. the entry just
    below the bucket holding the value, or entry 0 if none qualifies. Any nonzero
    entry inverts an exact encoding; this one is the least saturated entry that
    is still confidently nonzero, so it is the best conditioned on noisy outputs.
    """
    o = np.atleast_2d(o)
    above = o >= _RESOLVED
    k = o.shape[1]
    last = k - 1 - np.argmax(above[:, ::-1], axis=1)
    return np.where(above.any(axis=1), last, 0)


def decode_warped(o: np.ndarray, k: int) -> np.ndarray:
    """Vectorized decode to warped coordinates for a batch of shape ``(b, k)``."""
    o = np.atleast_2d(np.asarray(o, dtype=np.float64))
    j = select_index(o)
    oj = np.clip(o[np.arange(len(o)), j], 0.0, np.nextafter(1.0, 0.0))
    return np.clip(-np.log1p(-oj) + j, 0.0, float(k))


def warp_many(d, spec: BucketSpec) -> np.ndarray:
    d = np.clip(np.asarray(d, dtype=np.float64), spec.lo, spec.hi)
    return spec.k * (np.log(d) - math.log(spec.lo)) / spec._log_span


def unwarp_many(s, spec: BucketSpec) -> np.ndarray:
    s = np.clip(np.asarray(s, dtype=np.float64), 0.0, float(spec.k))
    return np.exp(math.log(spec.lo) + s * spec._log_span / spec.k)


def encode_many(d, spec: BucketSpec) -> np.ndarray:
    """Batch ``encode``: values of shape ``(n,)`` to vectors of shape ``(n, k)``."""
    return encode_warped(warp_many(d, spec), spec.k)


def decode_many(o, spec: BucketSpec) -> np.ndarray:
    """Batch ``decode``: vectors of shape ``(n, k)`` to values of shape ``(n,)``."""
    return unwarp_many(decode_warped(o, spec.k), spec)


def decode(o, spec: BucketSpec) -> float:
    o = np.asarray(o, dtype=np.float64)
    if o.shape != (spec.k,):
        raise ValueError(f"expected {spec.k} components, got shape {o.shape}")
    return unwarp(float(decode_warped(o[None, :], spec.k)[0]), spec)


# values sitting on an edge must not fall into the bucket below through log round-off
_EDGE_SLACK = 1e-9


def bucket_of(d: float, spec: BucketSpec) -> int:
    s, _ = warp(d, spec)
    return min(int(math.floor(s + _EDGE_SLACK)), spec.k - 1)


def bucket_of_warped(s: np.ndarray, k: int) -> np.ndarray:
    return np.minimum(np.floor(np.asarray(s) + _EDGE_SLACK), k - 1).astype(np.int64)
