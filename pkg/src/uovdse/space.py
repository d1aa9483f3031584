"""Input/output domains of the resource-allocation design space.

A workload is one GEMM layer ``(M, K) x (K, N) = (M, N)`` plus the dataflow of
the target accelerator. A hardware config is a ``(pe, buf)`` pair drawn from two
fixed option ladders, subject to a linear area budget.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from enum import IntEnum

M_MAX = 256
N_MAX = 1677
K_MAX = 1185

_LOG_M = math.log(M_MAX)
_LOG_N = math.log(N_MAX)
_LOG_K = math.log(K_MAX)


class RangeError(ValueError):
    """A workload field or config value lies outside its valid domain."""

    def __init__(self, field_name: str, value, lo, hi):
        super().__init__(f"{field_name}={value} outside [{lo}, {hi}]")
        self.field = field_name
        self.value = value


class Dataflow(IntEnum):
    """Which operand stays resident in the PE array."""

    WS = 0  # weight stationary
    OS = 1  # output stationary
    RS = 2  # row stationary

    @classmethod
    def parse(cls, text: str) -> "Dataflow":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown dataflow {text!r}; expected one of WS, OS, RS") from None


@dataclass(frozen=True)
class Workload:
    m: int
    n: int
    k: int
    dataflow: Dataflow

    def __post_init__(self):
        for name, hi in (("m", M_MAX), ("n", N_MAX), ("k", K_MAX)):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or not 1 <= v <= hi:
                raise RangeError(name, v, 1, hi)
        object.__setattr__(self, "dataflow", Dataflow(self.dataflow))

    @property
    def macs(self) -> int:
        return self.m * self.n * self.k


@dataclass(frozen=True, order=True)
class HardwareConfig:
    pe: int
    buf: int

    def __post_init__(self):
        if self.pe < 1:
            raise RangeError("pe", self.pe, 1, "inf")
        if self.buf < 1:
            raise RangeError("buf", self.buf, 1, "inf")


@dataclass(frozen=True)
class DesignSpace:
    """Discrete output space plus the area model that bounds it."""

    pe_options: tuple[int, ...] = field(default_factory=lambda: tuple(2 * i for i in range(1, 65)))
    buf_options: tuple[int, ...] = field(default_factory=lambda: tuple(256 * 2**i for i in range(12)))
    area_budget: int = 131072
    area_pe: int = 256
    area_buf_per_elem: int = 1

    def __post_init__(self):
        for name in ("pe_options", "buf_options"):
            opts = tuple(int(v) for v in getattr(self, name))
            if not opts or any(b <= a for a, b in zip(opts, opts[1:])) or opts[0] < 1:
                raise ValueError(f"{name} must be nonempty, positive and strictly increasing")
            object.__setattr__(self, name, opts)
        if self.area_budget < 0 or self.area_pe < 1 or self.area_buf_per_elem < 1:
            raise ValueError("area parameters must be positive")

    @property
    def n_configs(self) -> int:
        return len(self.pe_options) * len(self.buf_options)

    def configs(self):
        """All configs in (pe, buf) lexicographic order."""
        for pe in self.pe_options:
            for buf in self.buf_options:
                yield HardwareConfig(pe, buf)

    def contains(self, cfg: HardwareConfig) -> bool:
        return cfg.pe in self.pe_options and cfg.buf in self.buf_options

    def pe_index(self, pe: int) -> int:
        return self.pe_options.index(pe)

    def buf_index(self, buf: int) -> int:
        return self.buf_options.index(buf)

    def to_dict(self) -> dict:
        return {
            "pe_options": list(self.pe_options),
            "buf_options": list(self.buf_options),
            "area_budget": self.area_budget,
            "area_pe": self.area_pe,
            "area_buf_per_elem": self.area_buf_per_elem,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DesignSpace":
        return cls(
            pe_options=tuple(d["pe_options"]),
            buf_options=tuple(d["buf_options"]),
            area_budget=int(d["area_budget"]),
            area_pe=int(d["area_pe"]),
            area_buf_per_elem=int(d["area_buf_per_elem"]),
        )


def default_space() -> DesignSpace:
    return DesignSpace()


def area(cfg: HardwareConfig, space: DesignSpace) -> int:
    return space.area_pe * cfg.pe + space.area_buf_per_elem * cfg.buf


def is_feasible(cfg: HardwareConfig, space: DesignSpace) -> bool:
    return area(cfg, space) <= space.area_budget


def normalize(w: Workload) -> tuple[list[float], int]:
    """Log-scale each GEMM dim onto [0, 1]; the dataflow code passes through.

    Raises RangeError naming the field if the workload is out of range.
    """
    for name, hi in (("m", M_MAX), ("n", N_MAX), ("k", K_MAX)):
        v = getattr(w, name)
        if not 1 <= v <= hi:
            raise RangeError(name, v, 1, hi)
    f = [math.log(w.m) / _LOG_M, math.log(w.n) / _LOG_N, math.log(w.k) / _LOG_K]
    return f, int(w.dataflow)


def denormalize(f, code: int) -> Workload:
    """Inverse of :func:`normalize` up to integer rounding."""
    m, n, k = (int(round(math.exp(x * s))) for x, s in zip(f, (_LOG_M, _LOG_N, _LOG_K)))
    return Workload(m, n, k, Dataflow(code))


def nearest_option(value: float, options) -> int:
    """Closest option to ``value``; equidistant candidates resolve to the smaller one."""
    if not options:
        raise ValueError("options must be nonempty")
    i = bisect.bisect_left(options, value)
    if i == 0:
        return options[0]
    if i == len(options):
        return options[-1]
    lo, hi = options[i - 1], options[i]
    return lo if value - lo <= hi - value else hi
