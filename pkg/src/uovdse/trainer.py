"""Two-stage training, evaluation metrics and latent-space export.

Stage 1 fits the encoder and latency head with contrastive + L1 loss. Stage 2
freezes the encoder, caches its latents once, and fits the decoder and output
heads with the ordinal focal loss (or softmax cross-entropy for the baseline).
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses
from .costmodel import latency
from .model import (
    HeadMode,
    Model,
    ModelConfig,
    ModelFormatError,
    as_tensors,
    classification_forward,
    decoder_forward,
    decoder_names,
    encoder_forward,
    encoder_names,
    features,
    init,
    param_shapes,
)
from .oracle import Dataset, imbalance_report, label_histogram, solve
from .space import nearest_option
from .uov import BucketSpec, bucket_of, encode_warped, make_buckets, warp

log = logging.getLogger(__name__)


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs_stage1: int = 500
    epochs_stage2: int = 100
    seed: int = 0
    contrastive: bool = True  # stage-1 ablation switch
    tau: float = 0.4
    alpha: float = 0.75
    gamma: float = 1.0

    def __post_init__(self):
        if self.batch_size < 2 or self.lr <= 0 or self.eps <= 0:
            raise TrainConfigError("batch_size >= 2, lr > 0 and eps > 0 are required")
        if self.epochs_stage1 < 1 or self.epochs_stage2 < 1:
            raise TrainConfigError("epochs must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise TrainConfigError("betas must lie in [0, 1)")


def default_specs(space, k_pe: int = 16, k_buf: int = 12) -> tuple[BucketSpec, BucketSpec]:
    return (
        make_buckets(space.pe_options[0], space.pe_options[-1], k_pe),
        make_buckets(space.buf_options[0], space.buf_options[-1], k_buf),
    )


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """In-place Adam update with bias correction for every name in ``grads``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        params[name] -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# ---------------------------------------------------------------------------
# data prep


@dataclass
class _Arrays:
    feats: np.ndarray
    codes: np.ndarray
    s_pe: np.ndarray
    s_buf: np.ndarray
    b_pe: np.ndarray
    b_buf: np.ndarray
    perf: np.ndarray
    cls_joint: np.ndarray  # option-index class for the baseline head


def _arrays(d: Dataset, pe_spec: BucketSpec, buf_spec: BucketSpec, mu: float, sigma: float) -> _Arrays:
    ws = [s.workload for s in d.samples]
    feats, codes = features(ws)
    space = d.manifest.space
    s_pe = np.array([warp(s.opt.pe, pe_spec)[0] for s in d.samples])
    s_buf = np.array([warp(s.opt.buf, buf_spec)[0] for s in d.samples])
    lat = np.array([s.opt_latency for s in d.samples], dtype=np.float64)
    nb = len(space.buf_options)
    return _Arrays(
        feats=feats,
        codes=codes,
        s_pe=s_pe,
        s_buf=s_buf,
        b_pe=np.array([bucket_of(s.opt.pe, pe_spec) for s in d.samples]),
        b_buf=np.array([bucket_of(s.opt.buf, buf_spec) for s in d.samples]),
        perf=(np.log(lat) - mu) / sigma,
        cls_joint=np.array([space.pe_index(s.opt.pe) * nb + space.buf_index(s.opt.buf) for s in d.samples]),
    )


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, size):
        idx = perm[i : i + size]
        if len(idx) >= 2:
            yield idx


def _check_size(d: Dataset, tcfg: TrainConfig):
    if len(d) < tcfg.batch_size:
        raise TrainConfigError(f"dataset has {len(d)} samples, fewer than one batch of {tcfg.batch_size}")


def _write_log(run_dir, rows, stage: int):
    """Rewrite ``train_log.csv``, replacing earlier rows of the same stage."""
    if run_dir is None:
        return
    path = Path(run_dir) / "train_log.csv"
    kept = []
    if path.exists():
        with path.open(newline="") as fh:
            kept = [r for r in csv.reader(fh) if len(r) >= 2 and r[1] != str(stage)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerows(kept)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# stage 1


def stage1_loss(P, arr: _Arrays, idx, mcfg: ModelConfig, tcfg: TrainConfig):
    lam, perf = encoder_forward(P, arr.feats[idx], arr.codes[idx], mcfg)
    loss = losses.perf_l1(perf, arr.perf[idx])
    if tcfg.contrastive:
        classes = arr.b_pe[idx] * 1000 + arr.b_buf[idx]
        lc, _ = losses.contrastive_loss(lam, classes, losses.ContrastiveConfig(tcfg.tau))
        loss = ad.add(lc, loss)
    return loss


def train_stage1(
    train: Dataset,
    tcfg: TrainConfig,
    mcfg: ModelConfig,
    run_dir=None,
    pe_spec: BucketSpec | None = None,
    buf_spec: BucketSpec | None = None,
) -> tuple[Model, list[float]]:
    """Fit encoder + latency head. Returns the model and per-epoch mean losses."""
    _check_size(train, tcfg)
    space = train.manifest.space
    if pe_spec is None or buf_spec is None:
        pe_spec, buf_spec = default_specs(space, mcfg.k_pe, mcfg.k_buf)
    mu, sigma = train.manifest.log_latency_mean, train.manifest.log_latency_std
    arr = _arrays(train, pe_spec, buf_spec, mu, sigma)
    params = init(mcfg)
    names = encoder_names(params)
    state = AdamState()
    rng = np.random.default_rng(tcfg.seed)
    history, rows = [], []
    for epoch in range(tcfg.epochs_stage1):
        total, count = 0.0, 0
        for idx in _batches(len(train), tcfg.batch_size, rng):
            P = as_tensors(params, names)
            with ad.Tape():
                loss = stage1_loss(P, arr, idx, mcfg, tcfg)
                g = ad.backward(loss, [P[n] for n in names])
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite stage-1 loss at epoch {epoch}")
            adam_step(params, {n: g[P[n]] for n in names}, state, tcfg)
            total += loss.item() * len(idx)
            count += len(idx)
        history.append(total / count)
        rows.append((epoch, 1, repr(history[-1])))
        log.info("stage1 epoch %d loss %.6f", epoch, history[-1])
    _write_log(run_dir, rows, 1)
    meta = {
        "stage": 1,
        "norm": {"log_latency_mean": mu, "log_latency_std": sigma},
        "train": _train_meta(tcfg),
        "dataset": {"seed": train.manifest.seed, "count": train.manifest.count},
    }
    model = Model(mcfg, params, pe_spec, buf_spec, space, train.manifest.cost, meta)
    return model, history


def _train_meta(tcfg: TrainConfig) -> dict:
    return asdict(tcfg)


def encoder_digest(model: Model) -> str:
    h = hashlib.sha256()
    for n in encoder_names(model.params):
        h.update(n.encode())
        h.update(np.ascontiguousarray(model.params[n]).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# stage 2


def train_stage2(
    train: Dataset,
    encoder: Model,
    tcfg: TrainConfig,
    head_mode: HeadMode | str = HeadMode.UOV,
    run_dir=None,
) -> tuple[Model, list[float]]:
    """Fit decoder + heads on cached latents of the frozen encoder."""
    if encoder.meta.get("stage") not in (1, 2):
        raise ModelFormatError("stage 2 needs a checkpoint produced by stage 1")
    _check_size(train, tcfg)
    head_mode = HeadMode(head_mode)
    mcfg = replace(encoder.cfg, head_mode=head_mode)
    fresh = init(mcfg)
    params = {}
    for name, shape, _ in param_shapes(mcfg):
        if name.startswith(("enc.", "perf.")):
            if name not in encoder.params or encoder.params[name].shape != shape:
                raise ModelFormatError(f"encoder checkpoint lacks compatible parameter {name}")
            params[name] = encoder.params[name].copy()
        else:
            params[name] = fresh[name]
    before = encoder_digest(encoder)

    norm = encoder.meta["norm"]
    arr = _arrays(train, encoder.pe_spec, encoder.buf_spec, norm["log_latency_mean"], norm["log_latency_std"])
    frozen = Model(mcfg, params, encoder.pe_spec, encoder.buf_spec, encoder.space, encoder.cost)
    lam_all = frozen.latents([s.workload for s in train.samples])
    q_pe = encode_warped(arr.s_pe, mcfg.k_pe)
    q_buf = encode_warped(arr.s_buf, mcfg.k_buf)
    ucfg = losses.UnificationConfig(tcfg.alpha, tcfg.gamma)

    names = decoder_names(params)
    state = AdamState()
    rng = np.random.default_rng(tcfg.seed + 1)
    history, rows = [], []
    for epoch in range(tcfg.epochs_stage2):
        total, count = 0.0, 0
        for idx in _batches(len(train), tcfg.batch_size, rng):
            P = as_tensors(params, names)
            with ad.Tape():
                loss = stage2_loss(P, lam_all[idx], q_pe[idx], q_buf[idx], arr.cls_joint[idx], mcfg, ucfg)
                g = ad.backward(loss, [P[n] for n in names])
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite stage-2 loss at epoch {epoch}")
            adam_step(params, {n: g[P[n]] for n in names}, state, tcfg)
            total += loss.item() * len(idx)
            count += len(idx)
        history.append(total / count)
        rows.append((epoch, 2, repr(history[-1])))
        log.info("stage2 epoch %d loss %.6f", epoch, history[-1])
    _write_log(run_dir, rows, 2)

    meta = dict(encoder.meta)
    meta["stage"] = 2
    meta["train"] = _train_meta(tcfg)
    model = Model(mcfg, params, encoder.pe_spec, encoder.buf_spec, encoder.space, encoder.cost, meta)
    if encoder_digest(model) != before:
        raise AssertionError("encoder parameters changed during stage 2")
    return model, history


def stage2_loss(P, lam, q_pe, q_buf, cls_joint, mcfg: ModelConfig, ucfg: losses.UnificationConfig):
    if mcfg.head_mode == HeadMode.UOV:
        u_pe, u_buf = decoder_forward(P, lam, mcfg)
        return ad.add(losses.unification_loss(u_pe, q_pe, ucfg), losses.unification_loss(u_buf, q_buf, ucfg))
    return losses.softmax_cross_entropy(classification_forward(P, lam, mcfg), cls_joint)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class Metrics:
    joint_bucket_accuracy: float
    pe_bucket_accuracy: float
    buf_bucket_accuracy: float
    exact_config_accuracy: float
    geomean_latency_ratio: float
    label_prior_accuracy: float
    classes: int
    top_decile_share: float
    samples: int

    @property
    def per_head_accuracy(self) -> tuple[float, float]:
        return self.pe_bucket_accuracy, self.buf_bucket_accuracy

    def to_dict(self) -> dict:
        return asdict(self)


class OracleModel:
    """Exhaustive-search stand-in with the predictor interface; for self-tests."""

    def __init__(self, space, cost, pe_spec=None, buf_spec=None):
        self.space, self.cost = space, cost
        dpe, dbuf = default_specs(space)
        self.pe_spec, self.buf_spec = pe_spec or dpe, buf_spec or dbuf

    def predict_many(self, workloads):
        return [solve(w, self.space, self.cost)[0] for w in workloads]

    def decoded_values(self, workloads):
        cfgs = self.predict_many(workloads)
        return np.array([c.pe for c in cfgs], float), np.array([c.buf for c in cfgs], float)


def evaluate(test: Dataset, model) -> Metrics:
    ws = [s.workload for s in test.samples]
    pe_hat, buf_hat = model.decoded_values(ws)
    # every head kind is scored on the legal option it recommends (before the joint budget projection)
    pe_opt = [nearest_option(v, model.space.pe_options) for v in pe_hat]
    buf_opt = [nearest_option(v, model.space.buf_options) for v in buf_hat]
    pe_ok = np.array([bucket_of(v, model.pe_spec) == bucket_of(s.opt.pe, model.pe_spec) for v, s in zip(pe_opt, test.samples)])
    buf_ok = np.array(
        [bucket_of(v, model.buf_spec) == bucket_of(s.opt.buf, model.buf_spec) for v, s in zip(buf_opt, test.samples)]
    )
    preds = model.predict_many(ws)
    exact = np.array([p == s.opt for p, s in zip(preds, test.samples)])
    ratios = np.array([latency(s.workload, p, model.cost) / s.opt_latency for p, s in zip(preds, test.samples)])
    hist = label_histogram(test, model.pe_spec, model.buf_spec)
    rep = imbalance_report(hist)
    return Metrics(
        joint_bucket_accuracy=float((pe_ok & buf_ok).mean()),
        pe_bucket_accuracy=float(pe_ok.mean()),
        buf_bucket_accuracy=float(buf_ok.mean()),
        exact_config_accuracy=float(exact.mean()),
        geomean_latency_ratio=float(math.exp(np.log(ratios).mean())),
        label_prior_accuracy=max(hist.values()) / len(test),
        classes=rep["classes"],
        top_decile_share=rep["top_decile_share"],
        samples=len(test),
    )


# ---------------------------------------------------------------------------
# latent export


def principal_components(x: np.ndarray, n_components: int = 2, iters: int = 200, tol: float = 1e-10):
    """Top eigenpairs of the covariance of ``x`` by power iteration with deflation.

    Returns ``(components, variances)``; components are rows, unit norm.
    """
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(len(x) - 1, 1)
    dim = cov.shape[0]
    rng = np.random.default_rng(0)
    comps, vals = [], []
    work = cov.copy()
    for _ in range(n_components):
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = work @ v
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            w /= norm
            new_lam = float(w @ cov @ w)
            done = abs(new_lam - lam) <= tol * max(1.0, abs(new_lam)) and np.linalg.norm(w - v) < 1e-6
            v, lam = w, new_lam
            if done:
                break
        comps.append(v)
        vals.append(float(v @ cov @ v))
        work = work - vals[-1] * np.outer(v, v)
    return np.array(comps), np.array(vals)


def export_embeddings(test: Dataset, model: Model, path) -> np.ndarray:
    """Write ``x,y,pe_bucket,buf_bucket`` rows (PCA of latents); returns the projection."""
    lam = model.latents([s.workload for s in test.samples])
    comps, _ = principal_components(lam, 2)
    proj = (lam - lam.mean(axis=0)) @ comps.T
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "pe_bucket", "buf_bucket"])
        for (x, y), s in zip(proj, test.samples):
            w.writerow([format(x, ".17g"), format(y, ".17g"), bucket_of(s.opt.pe, model.pe_spec), bucket_of(s.opt.buf, model.buf_spec)])
    return proj


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
