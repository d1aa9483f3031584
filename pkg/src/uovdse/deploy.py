"""Pick one hardware config for a whole network from per-layer recommendations.

Method 1 scores every distinct recommendation by the summed latency of all
layers (layers run back to back on one accelerator) and keeps the fastest.
Method 2 finds the layer that is slowest on its own recommendation and adopts
that layer's config.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .costmodel import CostParams, latency
from .space import Dataflow, DesignSpace, HardwareConfig, RangeError, Workload, area

LAYER_HEADER = "m,n,k,dataflow"
SAMPLE_FILES = ("resnet_like.csv", "decoder_transformer_like.csv")


class ParseError(ValueError):
    def __init__(self, message: str, line: int, field: str | None = None):
        where = f"line {line}" + (f", field {field!r}" if field else "")
        super().__init__(f"{where}: {message}")
        self.line = line
        self.field = field


@dataclass(frozen=True)
class ModelWorkload:
    name: str
    layers: tuple[Workload, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        object.__setattr__(self, "layers", tuple(self.layers))


def sample_path(name: str) -> Path:
    """Path of a layer file shipped with the package."""
    return Path(str(resources.files("uovdse") / "data" / name))


def parse_model_workload(text: str, default_name: str = "model") -> ModelWorkload:
    name = default_name
    layers = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.lower().startswith("name:"):
                name = body[5:].strip() or name
            continue
        if line.replace(" ", "") == LAYER_HEADER:
            continue
        fields = [f.strip() for f in line.split(",")]
        names = ("m", "n", "k", "dataflow")
        if len(fields) != 4:
            missing = names[len(fields)] if len(fields) < 4 else None
            raise ParseError(f"expected 4 fields, got {len(fields)}", lineno, missing)
        dims = []
        for fname, value in zip(names[:3], fields[:3]):
            try:
                dims.append(int(value))
            except ValueError:
                raise ParseError(f"not an integer: {value!r}", lineno, fname) from None
        try:
            df = Dataflow.parse(fields[3])
        except ValueError as e:
            raise ParseError(str(e), lineno, "dataflow") from None
        try:
            layers.append(Workload(*dims, df))
        except RangeError as e:
            e.line = lineno
            e.args = (f"line {lineno}: {e.args[0]}",)
            raise
    if not layers:
        raise ParseError("no layers found", max(1, len(text.splitlines())))
    return ModelWorkload(name, tuple(layers))


def load_model_workload(path) -> ModelWorkload:
    path = Path(path)
    return parse_model_workload(path.read_text(encoding="utf-8"), default_name=path.stem)


def model_latency(mw: ModelWorkload, cfg: HardwareConfig, p: CostParams = CostParams()) -> int:
    return sum(latency(w, cfg, p) for w in mw.layers)


def _distinct(recs):
    return list(dict.fromkeys(recs))


def method1(
    mw: ModelWorkload, recs, p: CostParams = CostParams(), space: DesignSpace = DesignSpace()
) -> HardwareConfig:
    """Recommendation with the smallest summed latency; ties -> smaller area, then pe."""
    recs = list(recs)
    if not recs:
        raise ValueError("no recommendations")
    return min(_distinct(recs), key=lambda c: (model_latency(mw, c, p), area(c, space), c.pe))


def layer_latencies(mw: ModelWorkload, recs, p: CostParams = CostParams()) -> list[int]:
    return [latency(w, r, p) for w, r in zip(mw.layers, recs, strict=True)]


def method2(mw: ModelWorkload, recs, p: CostParams = CostParams()) -> HardwareConfig:
    """Config recommended for the bottleneck layer; ties -> earliest layer."""
    recs = list(recs)
    if len(recs) != len(mw.layers):
        raise ValueError(f"{len(recs)} recommendations for {len(mw.layers)} layers")
    lats = layer_latencies(mw, recs, p)
    return recs[lats.index(max(lats))]
