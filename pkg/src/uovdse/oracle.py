"""Exhaustive-search labeling and the on-disk dataset format.

Each sample pairs a random workload with the latency-optimal feasible config,
found by scanning every option pair. Workloads for index ``i`` come from a
generator seeded with ``mix(seed, i)`` so a dataset is identical no matter how
many workers produce it or in which order.

File format: ``m,n,k,dataflow,pe,buf,latency`` CSV (LF, ASCII integers,
dataflow as WS/OS/RS) plus a ``<stem>.manifest.json`` sidecar.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .costmodel import CostParams, latency_grid
from .space import (
    K_MAX,
    M_MAX,
    N_MAX,
    Dataflow,
    DesignSpace,
    HardwareConfig,
    RangeError,
    Workload,
)
from .uov import BucketSpec, bucket_of

CSV_HEADER = "m,n,k,dataflow,pe,buf,latency"
_MASK64 = (1 << 64) - 1


class NoFeasibleConfigError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class IntegrityError(ValueError):
    """Dataset rows disagree with the statistics recorded in the manifest."""


@dataclass(frozen=True)
class Sample:
    workload: Workload
    opt: HardwareConfig
    opt_latency: int


@dataclass(frozen=True)
class DatasetManifest:
    seed: int
    count: int
    space: DesignSpace
    cost: CostParams
    log_latency_mean: float
    log_latency_std: float

    def to_json(self) -> str:
        # floats are written with 17 significant digits so they round-trip exactly
        body = {
            "seed": self.seed,
            "count": self.count,
            "space": self.space.to_dict(),
            "cost": self.cost.to_dict(),
            "log_latency_mean": "@MEAN@",
            "log_latency_std": "@STD@",
        }
        text = json.dumps(body, indent=2)
        text = text.replace('"@MEAN@"', format(self.log_latency_mean, ".17g"))
        return text.replace('"@STD@"', format(self.log_latency_std, ".17g")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        return cls(
            seed=int(d["seed"]),
            count=int(d["count"]),
            space=DesignSpace.from_dict(d["space"]),
            cost=CostParams.from_dict(d["cost"]),
            log_latency_mean=float(d["log_latency_mean"]),
            log_latency_std=float(d["log_latency_std"]),
        )


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    manifest: DatasetManifest

    def __len__(self):
        return len(self.samples)

    def subset(self, start: int, stop: int) -> "Dataset":
        """Contiguous slice with its own manifest (count and statistics recomputed)."""
        part = self.samples[start:stop]
        if not part:
            raise ValueError("empty subset")
        mean, std = _stats([s.opt_latency for s in part])
        return Dataset(part, replace(self.manifest, count=len(part), log_latency_mean=mean, log_latency_std=std))

    def split(self, n_test: int) -> tuple["Dataset", "Dataset"]:
        """``(train, test)`` with the last ``n_test`` samples held out."""
        if not 0 < n_test < len(self.samples):
            raise ValueError(f"test count must lie in [1, {len(self.samples) - 1}]")
        cut = len(self.samples) - n_test
        return self.subset(0, cut), self.subset(cut, len(self.samples))


def solve(w: Workload, space: DesignSpace, p: CostParams = CostParams()) -> tuple[HardwareConfig, int]:
    """Latency-optimal feasible config; ties go to smaller area, then pe, then buf."""
    lat = latency_grid(w, space, p)
    pe = np.asarray(space.pe_options, dtype=np.int64)[:, None]
    buf = np.asarray(space.buf_options, dtype=np.int64)[None, :]
    area = space.area_pe * pe + space.area_buf_per_elem * buf
    feasible = area <= space.area_budget
    if not feasible.any():
        raise NoFeasibleConfigError(f"no config fits area budget {space.area_budget}")
    best = lat[feasible].min()
    ii, jj = np.nonzero(feasible & (lat == best))
    order = np.lexsort((buf[0, jj], pe[ii, 0], area[ii, jj]))
    i, j = ii[order[0]], jj[order[0]]
    return HardwareConfig(int(pe[i, 0]), int(buf[0, j])), int(best)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def mix(seed: int, index: int) -> int:
    """64-bit stream key for sample ``index``: ``splitmix64(splitmix64(seed) ^ index)``."""
    return splitmix64(splitmix64(seed & _MASK64) ^ (index & _MASK64))


def _log_uniform_int(rng: np.random.Generator, hi: int) -> int:
    v = int(round(math.exp(rng.uniform(0.0, math.log(hi)))))
    return min(max(v, 1), hi)


def sample_workload(rng: np.random.Generator) -> Workload:
    m = _log_uniform_int(rng, M_MAX)
    n = _log_uniform_int(rng, N_MAX)
    k = _log_uniform_int(rng, K_MAX)
    return Workload(m, n, k, Dataflow(int(rng.integers(3))))


def _label_range(args) -> list[tuple[int, ...]]:
    seed, start, stop, space, p = args
    rows = []
    for i in range(start, stop):
        w = sample_workload(np.random.default_rng(mix(seed, i)))
        cfg, lat = solve(w, space, p)
        rows.append((w.m, w.n, w.k, int(w.dataflow), cfg.pe, cfg.buf, lat))
    return rows


def _stats(latencies) -> tuple[float, float]:
    logs = np.log(np.asarray(latencies, dtype=np.float64))
    mean = float(logs.mean())
    std = float(logs.std()) if len(logs) >= 2 else 1.0
    return mean, (std if std > 0 else 1.0)


def generate(
    n: int,
    seed: int,
    space: DesignSpace | None = None,
    p: CostParams | None = None,
    threads: int = 1,
) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    space = space or DesignSpace()
    p = p or CostParams()
    if threads <= 1:
        rows = _label_range((seed, 0, n, space, p))
    else:
        chunk = -(-n // (threads * 4))
        jobs = [(seed, s, min(s + chunk, n), space, p) for s in range(0, n, chunk)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = [r for part in pool.map(_label_range, jobs) for r in part]
    samples = tuple(
        Sample(Workload(m, nn, k, Dataflow(df)), HardwareConfig(pe, buf), lat)
        for m, nn, k, df, pe, buf, lat in rows
    )
    mean, std = _stats([s.opt_latency for s in samples])
    return Dataset(samples, DatasetManifest(seed, n, space, p, mean, std))


# ---------------------------------------------------------------------------
# label statistics


def label_histogram(d: Dataset, pe_spec: BucketSpec, buf_spec: BucketSpec) -> Counter:
    if not d.samples:
        raise ValueError("dataset is empty")
    return Counter((bucket_of(s.opt.pe, pe_spec), bucket_of(s.opt.buf, buf_spec)) for s in d.samples)


def imbalance_report(hist: Counter) -> dict:
    """Summary of how skewed the class distribution is."""
    counts = sorted(hist.values(), reverse=True)
    total = sum(counts)
    top = max(1, math.ceil(len(counts) / 10))
    return {
        "samples": total,
        "classes": len(counts),
        "max_min_ratio": counts[0] / counts[-1],
        "top_decile_share": sum(counts[:top]) / total,
    }


# ---------------------------------------------------------------------------
# CSV io


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def write_csv(d: Dataset, path) -> None:
    path = Path(path)
    lines = [CSV_HEADER]
    for s in d.samples:
        w = s.workload
        lines.append(f"{w.m},{w.n},{w.k},{w.dataflow.name},{s.opt.pe},{s.opt.buf},{s.opt_latency}")
    path.write_bytes(("\n".join(lines) + "\n").encode("ascii"))
    manifest_path(path).write_text(d.manifest.to_json(), encoding="ascii", newline="\n")


def _parse_int(text: str, name: str, line: int) -> int:
    if not text.isdigit():
        raise ParseError(f"field {name!r} is not a decimal integer: {text!r}", line)
    return int(text)


def read_csv(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes().decode("ascii", errors="replace")
    mpath = manifest_path(path)
    if not mpath.exists():
        raise ParseError(f"missing manifest {mpath}")
    try:
        manifest = DatasetManifest.from_json(mpath.read_text(encoding="ascii"))
    except (ValueError, KeyError, TypeError) as e:
        raise ParseError(f"bad manifest {mpath}: {e}") from None

    lines = raw.split("\n")
    if not raw or lines[0] != CSV_HEADER:
        raise ParseError(f"expected header {CSV_HEADER!r}", 1)
    complete = raw.endswith("\n")
    body = lines[1:-1] if complete else lines[1:]
    samples = []
    last_good = 1
    for offset, text in enumerate(body):
        lineno = offset + 2
        if not complete and offset == len(body) - 1:
            raise ParseError(f"truncated row {text!r}; last good line is {last_good}", lineno)
        fields = text.split(",")
        if len(fields) != 7:
            raise ParseError(f"expected 7 fields, got {len(fields)}; last good line is {last_good}", lineno)
        m, n, k = (_parse_int(fields[i], nm, lineno) for i, nm in enumerate(("m", "n", "k")))
        try:
            df = Dataflow[fields[3]]
        except KeyError:
            raise ParseError(f"unknown dataflow {fields[3]!r}", lineno) from None
        pe, buf, lat = (_parse_int(fields[i], nm, lineno) for i, nm in ((4, "pe"), (5, "buf"), (6, "latency")))
        try:
            sample = Sample(Workload(m, n, k, df), HardwareConfig(pe, buf), lat)
        except RangeError as e:
            raise ParseError(str(e), lineno) from None
        samples.append(sample)
        last_good = lineno

    if len(samples) != manifest.count:
        raise ParseError(
            f"file holds {len(samples)} samples but manifest declares {manifest.count}; "
            f"last good line is {last_good}",
            last_good,
        )
    if not samples:
        raise ParseError("dataset has no samples")
    mean, std = _stats([s.opt_latency for s in samples])
    if not (
        math.isclose(mean, manifest.log_latency_mean, rel_tol=1e-12, abs_tol=1e-12)
        and math.isclose(std, manifest.log_latency_std, rel_tol=1e-12, abs_tol=1e-12)
    ):
        raise IntegrityError("latency statistics do not match the manifest")
    return Dataset(tuple(samples), manifest)
