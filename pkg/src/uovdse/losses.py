"""Training objectives built on the autodiff core.

* balanced supervised infoNCE over latent embeddings (stage 1)
* L1 latency-prediction loss (stage 1)
* ordinal focal loss over unified ordinal vectors (stage 2)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.4

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")


@dataclass(frozen=True)
class UnificationConfig:
    alpha: float = 0.75
    gamma: float = 1.0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


def pair_sets(classes) -> tuple[np.ndarray, np.ndarray]:
    """Boolean ``(positive, negative)`` masks; row p lists the partners of anchor p."""
    c = np.asarray(classes)
    same = c[:, None] == c[None, :]
    off_diag = ~np.eye(len(c), dtype=bool)
    return same & off_diag, ~same


def _masked_lse(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise ``log(sum(exp(x) over mask))``, shifted by each row's masked max."""
    shift = np.where(mask, x.data, -np.inf).max(axis=1, keepdims=True)
    # off-mask entries are shifted to exp(0) so they cannot overflow before masking
    e = ad.exp(ad.sub(x, np.where(mask, shift, x.data)))
    return ad.add(ad.ln(ad.reduce_sum(ad.mul(e, mask.astype(np.float64)), axis=1)), shift[:, 0])


def contrastive_loss(latents: Tensor, classes, cfg: ContrastiveConfig = ContrastiveConfig()):
    """Mean over anchors of ``-log(sum_pos / (sum_pos + sum_neg))`` on ``exp(sim / tau)``.

    Anchors with no in-batch positive are skipped. Returns ``(loss, skipped)``
    where ``skipped`` is True when no anchor had a positive (loss is then 0).
    """
    latents = ad._as_tensor(latents)
    b = latents.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    pos, neg = pair_sets(classes)
    has_pos = pos.any(axis=1)
    if not has_pos.any():
        return ad.scale(ad.reduce_sum(latents), 0.0), True

    sim = ad.scale(ad.matmul(latents, ad.transpose(latents, (1, 0))), 1.0 / cfg.tau)
    # rows without positives get a dummy self-pair and zero weight
    pos_or_dummy = pos | np.diag(~has_pos)
    per_anchor = ad.sub(_masked_lse(sim, pos | neg), _masked_lse(sim, pos_or_dummy))
    weight = has_pos.astype(np.float64) / has_pos.sum()
    return ad.reduce_sum(ad.mul(per_anchor, weight)), False


def perf_l1(perf_hat, target) -> Tensor:
    """Mean absolute error; the subgradient at equality is 0."""
    perf_hat = ad._as_tensor(perf_hat)
    target = np.asarray(target, dtype=np.float64).reshape(perf_hat.shape)
    return ad.reduce_mean(ad.abs(ad.sub(perf_hat, target)))


def bce(u, q) -> Tensor:
    """Elementwise binary cross-entropy with ``u`` clamped to ``[1e-7, 1 - 1e-7]``."""
    u = ad.clip(ad._as_tensor(u), PROB_CLAMP, 1.0 - PROB_CLAMP)
    q = np.asarray(q, dtype=np.float64)
    return ad.sub(ad.scale(ad.mul(ad.ln(u), q), -1.0), ad.mul(ad.ln(ad.sub(1.0, u)), 1.0 - q))


def unification_loss(u, q, cfg: UnificationConfig = UnificationConfig()) -> Tensor:
    """Ordinal focal loss summed over the k entries (and averaged over a batch).

    Entries with ``q_i > 0`` are weighted by ``alpha |q_i - u_i|^gamma``; the
    rest by ``(1 - alpha) u_i^gamma``. Accepts shape ``(k,)`` or ``(batch, k)``.
    """
    u = ad._as_tensor(u)
    q = np.asarray(q, dtype=np.float64)
    if u.shape != q.shape:
        raise ShapeError(f"prediction shape {u.shape} != target shape {q.shape}")
    active = (q > 0).astype(np.float64)
    b = bce(u, q)
    near = ad.power(ad.abs(ad.sub(u, q)), cfg.gamma)
    far = ad.power(ad.clip(u, 0.0, 1.0), cfg.gamma)
    focal = ad.add(ad.mul(near, cfg.alpha * active), ad.mul(far, (1.0 - cfg.alpha) * (1.0 - active)))
    per_row = ad.reduce_sum(ad.mul(focal, b), axis=-1)
    return ad.reduce_mean(per_row) if u.ndim > 1 else per_row


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean categorical cross-entropy for the classification-head baseline."""
    logits = ad._as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    shift = logits.data.max(axis=1, keepdims=True)
    z = ad.sub(logits, shift)
    lse = ad.ln(ad.reduce_sum(ad.exp(z), axis=1))
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = ad.reduce_sum(ad.mul(z, onehot), axis=1)
    return ad.reduce_mean(ad.sub(lse, picked))

