"""Encoder-decoder self-attention network mapping a workload to a hardware config.

The encoder embeds the four input features as four tokens, runs pre-norm
transformer blocks, mean-pools, and projects down to a unit-norm latent. A small
head on the latent predicts normalized log latency. The decoder projects the
latent back up to four tokens, runs its own blocks, and feeds the pooled state
to two ordinal-vector heads (PE count, buffer size) or, for the baseline, to
one softmax head over every (pe, buf) pair.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .costmodel import CostParams, latency
from .space import DesignSpace, HardwareConfig, Workload, area, is_feasible, nearest_option, normalize
from .uov import BucketSpec, decode_warped, unwarp

MAGIC = b"AIV2"
FORMAT_VERSION = 1
N_TOKENS = 4


class HeadMode(str, Enum):
    UOV = "uov"
    CLASSIFICATION = "classification"


class ModelFormatError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_latent: int = 32
    ffn_mult: int = 4
    k_pe: int = 16
    k_buf: int = 12
    head_mode: HeadMode = HeadMode.UOV
    seed: int = 0
    n_classes: int = 768  # joint (pe, buf) classes for the baseline head

    def __post_init__(self):
        object.__setattr__(self, "head_mode", HeadMode(self.head_mode))
        for name in ("d_model", "n_heads", "n_layers", "d_latent", "ffn_mult", "k_pe", "k_buf", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_mode"] = self.head_mode.value
        return d


# ---------------------------------------------------------------------------
# parameters


def _block_shapes(prefix: str, d: int, ffn: int) -> list[tuple[str, tuple[int, ...], str]]:
    out = [(f"{prefix}.ln1.g", (d,), "one"), (f"{prefix}.ln1.b", (d,), "zero")]
    for p in ("q", "k", "v", "o"):
        out += [(f"{prefix}.att.w{p}", (d, d), "w"), (f"{prefix}.att.b{p}", (d,), "zero")]
    out += [
        (f"{prefix}.ln2.g", (d,), "one"),
        (f"{prefix}.ln2.b", (d,), "zero"),
        (f"{prefix}.ffn.w1", (d, ffn * d), "w"),
        (f"{prefix}.ffn.b1", (ffn * d,), "zero"),
        (f"{prefix}.ffn.w2", (ffn * d, d), "w"),
        (f"{prefix}.ffn.b2", (d,), "zero"),
    ]
    return out


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered ``(name, shape, init kind)`` list; the order fixes the RNG stream."""
    d, dl, f = cfg.d_model, cfg.d_latent, cfg.ffn_mult
    s = [
        ("enc.feat.w", (3, d), "w"),
        ("enc.feat.b", (3, d), "zero"),
        ("enc.dataflow", (3, d), "emb"),
        ("enc.pos", (N_TOKENS, d), "emb"),
    ]
    for i in range(cfg.n_layers):
        s += _block_shapes(f"enc.L{i}", d, f)
    s += [
        ("enc.lnf.g", (d,), "one"),
        ("enc.lnf.b", (d,), "zero"),
        ("enc.down.w", (d, dl), "w"),
        ("enc.down.b", (dl,), "zero"),
        ("perf.w1", (dl, dl), "w"),
        ("perf.b1", (dl,), "zero"),
        ("perf.w2", (dl, 1), "w"),
        ("perf.b2", (1,), "zero"),
        ("dec.up.w", (dl, N_TOKENS * d), "w"),
        ("dec.up.b", (N_TOKENS * d,), "zero"),
        ("dec.pos", (N_TOKENS, d), "emb"),
    ]
    for i in range(cfg.n_layers):
        s += _block_shapes(f"dec.L{i}", d, f)
    s += [("dec.lnf.g", (d,), "one"), ("dec.lnf.b", (d,), "zero")]
    if cfg.head_mode == HeadMode.UOV:
        for h, k in (("pe", cfg.k_pe), ("buf", cfg.k_buf)):
            s += [
                (f"head.{h}.w1", (d, d), "w"),
                (f"head.{h}.b1", (d,), "zero"),
                (f"head.{h}.w2", (d, k), "w"),
                (f"head.{h}.b2", (k,), "zero"),
            ]
    else:
        s += [("head.cls.w", (d, cfg.n_classes), "w"), ("head.cls.b", (cfg.n_classes,), "zero")]
    return s


def init(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, unit LayerNorm gains, 0.02-scale embeddings.

    Draws come from ``numpy.random.default_rng(cfg.seed)`` in :func:`param_shapes` order.
    """
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape, kind in param_shapes(cfg):
        if kind == "w":
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif kind == "emb":
            params[name] = 0.02 * rng.standard_normal(size=shape)
        elif kind == "one":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def encoder_names(params) -> list[str]:
    return [n for n in params if n.startswith(("enc.", "perf."))]


def decoder_names(params) -> list[str]:
    return [n for n in params if n.startswith(("dec.", "head."))]


def head_param_count(cfg: ModelConfig) -> int:
    """Parameters in the output heads alone (the part that scales with the label set)."""
    return sum(int(np.prod(s)) for n, s, _ in param_shapes(cfg) if n.startswith("head."))


# ---------------------------------------------------------------------------
# forward passes (P maps names to Tensors)


def _linear(x, P, w: str, b: str):
    return ad.add(ad.matmul(x, P[w]), P[b])


def _attention(x, P, prefix: str, n_heads: int):
    bsz, t, d = x.shape
    dh = d // n_heads

    def split(z):
        z = ad.reshape(z, (bsz, t, n_heads, dh))
        return ad.reshape(ad.transpose(z, (0, 2, 1, 3)), (bsz * n_heads, t, dh))

    q = split(_linear(x, P, f"{prefix}.wq", f"{prefix}.bq"))
    k = split(_linear(x, P, f"{prefix}.wk", f"{prefix}.bk"))
    v = split(_linear(x, P, f"{prefix}.wv", f"{prefix}.bv"))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    ctx = ad.matmul(ad.softmax_rows(scores), v)
    ctx = ad.reshape(ad.transpose(ad.reshape(ctx, (bsz, n_heads, t, dh)), (0, 2, 1, 3)), (bsz, t, d))
    return _linear(ctx, P, f"{prefix}.wo", f"{prefix}.bo")


def _block(x, P, prefix: str, n_heads: int):
    h = ad.layer_norm(x, P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])
    x = ad.add(x, _attention(h, P, f"{prefix}.att", n_heads))
    h = ad.layer_norm(x, P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])
    h = ad.relu(_linear(h, P, f"{prefix}.ffn.w1", f"{prefix}.ffn.b1"))
    return ad.add(x, _linear(h, P, f"{prefix}.ffn.w2", f"{prefix}.ffn.b2"))


def encoder_forward(P, feats, codes, cfg: ModelConfig):
    """Returns ``(latent, perf_hat)`` with shapes ``(B, d_latent)`` and ``(B,)``."""
    feats = np.asarray(feats, dtype=np.float64)
    bsz = feats.shape[0]
    tok = ad.add(ad.mul(feats[:, :, None], P["enc.feat.w"]), P["enc.feat.b"])
    df = ad.reshape(ad.take_rows(P["enc.dataflow"], np.asarray(codes)), (bsz, 1, cfg.d_model))
    x = ad.add(ad.concat([tok, df], axis=1), P["enc.pos"])
    for i in range(cfg.n_layers):
        x = _block(x, P, f"enc.L{i}", cfg.n_heads)
    x = ad.layer_norm(x, P["enc.lnf.g"], P["enc.lnf.b"])
    raw = _linear(ad.reduce_mean(x, axis=1), P, "enc.down.w", "enc.down.b")
    lam = ad.l2_normalize_rows(raw)
    perf = _linear(ad.relu(_linear(lam, P, "perf.w1", "perf.b1")), P, "perf.w2", "perf.b2")
    return lam, ad.reshape(perf, (bsz,))


def _decoder_trunk(P, lam, cfg: ModelConfig):
    lam = ad._as_tensor(lam)
    bsz = lam.shape[0]
    x = ad.reshape(_linear(lam, P, "dec.up.w", "dec.up.b"), (bsz, N_TOKENS, cfg.d_model))
    x = ad.add(x, P["dec.pos"])
    for i in range(cfg.n_layers):
        x = _block(x, P, f"dec.L{i}", cfg.n_heads)
    x = ad.layer_norm(x, P["dec.lnf.g"], P["dec.lnf.b"])
    return ad.reduce_mean(x, axis=1)


def decoder_forward(P, lam, cfg: ModelConfig):
    """Returns sigmoid activations ``(u_pe, u_buf)`` of shapes ``(B, k_pe)``, ``(B, k_buf)``."""
    if cfg.head_mode != HeadMode.UOV:
        raise ContractError("decoder_forward needs a model built with ordinal-vector heads")
    h = _decoder_trunk(P, lam, cfg)
    outs = []
    for name in ("pe", "buf"):
        z = ad.relu(_linear(h, P, f"head.{name}.w1", f"head.{name}.b1"))
        outs.append(ad.sigmoid(_linear(z, P, f"head.{name}.w2", f"head.{name}.b2")))
    return tuple(outs)


def classification_forward(P, lam, cfg: ModelConfig):
    """Logits over joint classes ``pe_index * n_buf + buf_index``."""
    if cfg.head_mode != HeadMode.CLASSIFICATION:
        raise ContractError("classification_forward needs a classification-mode model")
    return _linear(_decoder_trunk(P, lam, cfg), P, "head.cls.w", "head.cls.b")


def as_tensors(params: dict, requires_grad=()) -> dict[str, Tensor]:
    req = set(requires_grad)
    return {n: Tensor(v, requires_grad=n in req, name=n) for n, v in params.items()}


# ---------------------------------------------------------------------------
# inference


def project_feasible(w: Workload, cfg: HardwareConfig, space: DesignSpace, p: CostParams) -> HardwareConfig:
    """Step options down until the config fits the area budget.

    Each step lowers whichever dimension costs less latency; ties lower the buffer.
    """
    pi, bi = space.pe_index(cfg.pe), space.buf_index(cfg.buf)
    while not is_feasible(HardwareConfig(space.pe_options[pi], space.buf_options[bi]), space):
        if pi == 0 and bi == 0:
            break
        cands = []
        if bi > 0:
            c = HardwareConfig(space.pe_options[pi], space.buf_options[bi - 1])
            cands.append((latency(w, c, p), 0, pi, bi - 1))
        if pi > 0:
            c = HardwareConfig(space.pe_options[pi - 1], space.buf_options[bi])
            cands.append((latency(w, c, p), 1, pi - 1, bi))
        _, _, pi, bi = min(cands)
    return HardwareConfig(space.pe_options[pi], space.buf_options[bi])


@dataclass
class Model:
    """Parameters plus everything needed to turn raw outputs into configs."""

    cfg: ModelConfig
    params: dict
    pe_spec: BucketSpec
    buf_spec: BucketSpec
    space: DesignSpace = field(default_factory=DesignSpace)
    cost: CostParams = field(default_factory=CostParams)
    meta: dict = field(default_factory=dict)

    def latents(self, workloads, batch: int = 1024) -> np.ndarray:
        feats, codes = _features(workloads)
        P = as_tensors(self.params)
        out = [
            encoder_forward(P, feats[i : i + batch], codes[i : i + batch], self.cfg)[0].data
            for i in range(0, len(feats), batch)
        ]
        return np.concatenate(out) if out else np.zeros((0, self.cfg.d_latent))

    def raw_outputs(self, workloads, batch: int = 1024):
        """Decoder activations: ``(u_pe, u_buf)`` or classification logits."""
        lam = self.latents(workloads, batch)
        P = as_tensors(self.params)
        if self.cfg.head_mode == HeadMode.UOV:
            pe, buf = [], []
            for i in range(0, len(lam), batch):
                a, b = decoder_forward(P, lam[i : i + batch], self.cfg)
                pe.append(a.data)
                buf.append(b.data)
            return np.concatenate(pe), np.concatenate(buf)
        return np.concatenate(
            [classification_forward(P, lam[i : i + batch], self.cfg).data for i in range(0, len(lam), batch)]
        )

    def decoded_values(self, workloads) -> tuple[np.ndarray, np.ndarray]:
        """Continuous (pe, buf) estimates before snapping to legal options."""
        if self.cfg.head_mode == HeadMode.UOV:
            u_pe, u_buf = self.raw_outputs(workloads)
            pe = np.array([unwarp(s, self.pe_spec) for s in decode_warped(u_pe, self.pe_spec.k)])
            buf = np.array([unwarp(s, self.buf_spec) for s in decode_warped(u_buf, self.buf_spec.k)])
            return pe, buf
        logits = self.raw_outputs(workloads)
        cls = logits.argmax(axis=1)
        nb = len(self.space.buf_options)
        pe = np.array([self.space.pe_options[c // nb] for c in cls], dtype=np.float64)
        buf = np.array([self.space.buf_options[c % nb] for c in cls], dtype=np.float64)
        return pe, buf

    def predict_many(self, workloads) -> list[HardwareConfig]:
        workloads = list(workloads)
        pe, buf = self.decoded_values(workloads)
        out = []
        for w, a, b in zip(workloads, pe, buf):
            cfg = HardwareConfig(
                nearest_option(float(a), self.space.pe_options), nearest_option(float(b), self.space.buf_options)
            )
            out.append(project_feasible(w, cfg, self.space, self.cost))
        return out

    def predict(self, w: Workload) -> HardwareConfig:
        return self.predict_many([w])[0]


def _features(workloads) -> tuple[np.ndarray, np.ndarray]:
    rows = [normalize(w) for w in workloads]
    feats = np.array([f for f, _ in rows], dtype=np.float64).reshape(-1, 3)
    codes = np.array([c for _, c in rows], dtype=np.int64)
    return feats, codes


def features(workloads):
    return _features(list(workloads))


def predict(w: Workload, model: Model) -> HardwareConfig:
    return model.predict(w)


# ---------------------------------------------------------------------------
# checkpoint io


def save(model: Model, path) -> None:
    """Write the binary checkpoint (little-endian throughout)."""
    meta = {
        "config": model.cfg.to_dict(),
        "pe_spec": model.pe_spec.to_dict(),
        "buf_spec": model.buf_spec.to_dict(),
        "space": model.space.to_dict(),
        "cost": model.cost.to_dict(),
        **model.meta,
    }
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(model.params))]
    for name, arr in model.params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    doc = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(doc)) + doc)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFormatError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path) -> Model:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise ModelFormatError("bad magic; not a model checkpoint")
    version, count = r.unpack("<HI")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported checkpoint version {version}")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    (mlen,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"bad metadata: {e}") from None
    if r.pos != len(r.buf):
        raise ModelFormatError("trailing bytes after metadata")
    cfg = ModelConfig(**meta.pop("config"))
    expected = {n: s for n, s, _ in param_shapes(cfg)}
    if {n: p.shape for n, p in params.items()} != expected:
        raise ModelFormatError("parameter names/shapes do not match the stored config")
    return Model(
        cfg=cfg,
        params=params,
        pe_spec=BucketSpec.from_dict(meta.pop("pe_spec")),
        buf_spec=BucketSpec.from_dict(meta.pop("buf_spec")),
        space=DesignSpace.from_dict(meta.pop("space")),
        cost=CostParams.from_dict(meta.pop("cost")),
        meta=meta,
    )
