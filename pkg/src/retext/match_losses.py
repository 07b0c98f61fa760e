"""Image-text matching objectives.

Includes the identity-aware KL matching loss with soft identity targets, the
hardest-positive structure-preserving loss, and CLIP / Soft-CLIP baselines.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_engine as te
from .errors import BatchError, LossError, ParameterError
from .tensor_engine import Value


@dataclass
class MatchBatch:
    z_img: Value
    zhat_img: Value
    z_txt: Value
    zhat_txt: Value
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        shapes = {m.shape for m in (self.z_img, self.zhat_img, self.z_txt, self.zhat_txt)}
        if len(shapes) != 1:
            raise BatchError(f"embedding matrices disagree in shape: {sorted(shapes)}")
        if self.labels.shape != (self.z_img.shape[0],):
            raise BatchError(f"labels {self.labels.shape} vs batch {self.z_img.shape[0]}")

    @classmethod
    def from_projections(cls, z_img: Value, z_txt: Value, labels) -> "MatchBatch":
        return cls(z_img, te.l2_normalize_rows(z_img), z_txt, te.l2_normalize_rows(z_txt), labels)

    @property
    def n(self) -> int:
        return self.z_img.shape[0]


@dataclass
class SoftTargets:
    q: np.ndarray
    alpha: float
    fallback_rows: np.ndarray


def soft_targets(labels, alpha: float) -> SoftTargets:
    """Row i: ``alpha`` on the diagonal, the rest spread over same-label j != i.

    Rows without another same-label sample put all mass on the diagonal.
    """
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    labels = np.asarray(labels)
    n = labels.shape[0]
    same = labels[:, None] == labels[None, :]
    off = same & ~np.eye(n, dtype=bool)
    n_pos = off.sum(axis=1)
    fallback = n_pos == 0
    share = np.divide(1.0 - alpha, n_pos, out=np.zeros(n), where=~fallback)
    q = np.where(off, share[:, None], 0.0)
    q[np.arange(n), np.arange(n)] = np.where(fallback, 1.0, alpha)
    return SoftTargets(q=q, alpha=alpha, fallback_rows=np.flatnonzero(fallback))


def similarity_distribution(z_query: Value, zhat_key: Value, normalize_query: bool = False) -> Value:
    """softmax(z_query . zhat_key^T) per row, with no temperature.

    The query side is left unnormalized unless ``normalize_query`` is set.
    """
    if z_query.shape[-1] != zhat_key.shape[-1]:
        raise BatchError(f"query dim {z_query.shape} vs key dim {zhat_key.shape}")
    if normalize_query:
        z_query = te.l2_normalize_rows(z_query)
    return te.softmax_rows(te.matmul(z_query, te.transpose(zhat_key)))


def _kl_to_targets(logits: Value, q: np.ndarray, eps: float) -> Value:
    n = logits.shape[0]
    logp = te.log_softmax(logits)
    p = te.exp(logp)
    # p * (log p - log(q + eps)); a zero p contributes 0 since log p stays finite
    inner = te.add_const(logp, -np.log(q + eps))
    return te.scale(te.sum_(te.mul(p, inner)), 1.0 / n)


def identity_aware_matching_loss(batch: MatchBatch, alpha: float = 0.6, eps: float = 1e-8,
                                 normalize_query: bool = False) -> Value:
    """Sum of image->text and text->image KL(p || q) against soft identity targets."""
    if batch.n < 2:
        raise BatchError("identity-aware matching needs at least two samples")
    q = soft_targets(batch.labels, alpha).q
    zi, zt = batch.z_img, batch.z_txt
    if normalize_query:
        zi, zt = batch.zhat_img, batch.zhat_txt
    l_it = _kl_to_targets(te.matmul(zi, te.transpose(batch.zhat_txt)), q, eps)
    l_ti = _kl_to_targets(te.matmul(zt, te.transpose(batch.zhat_img)), q, eps)
    return te.add(l_it, l_ti)


def hardest_positives(zhat: np.ndarray, labels) -> np.ndarray:
    """Index of the least similar same-label sample per anchor, -1 if none.

    Ties resolve to the lowest index.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    sim = zhat @ zhat.T
    pos = (labels[:, None] == labels[None, :]) & ~np.eye(n, dtype=bool)
    masked = np.where(pos, sim, np.inf)
    idx = np.argmin(masked, axis=1)
    return np.where(pos.any(axis=1), idx, -1)


def structure_preserving_loss(batch: MatchBatch, tau: float = 0.1,
                              include_positive_in_denominator: bool = False) -> Value:
    """Hardest-positive contrastive loss over image embeddings.

    By default the denominator holds the negatives only, so the loss can go
    below zero.  With ``include_positive_in_denominator`` it is the usual
    InfoNCE form and stays nonnegative.
    """
    if tau <= 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    labels = batch.labels
    n = batch.n
    zhat = batch.zhat_img
    hard = hardest_positives(zhat.data, labels)
    neg = labels[:, None] != labels[None, :]
    eligible = np.flatnonzero((hard >= 0) & neg.any(axis=1))
    if eligible.size == 0:
        raise LossError("no anchor has both a positive and a negative; "
                        "check the sampler (need K_s >= 2 and P_s >= 2)")
    logits = te.scale(te.matmul(zhat, te.transpose(zhat)), 1.0 / tau)
    denom_mask = neg.copy()
    if include_positive_in_denominator:
        rows = np.flatnonzero(hard >= 0)
        denom_mask[rows, hard[rows]] = True
    s_pos = te.getitem(logits, (eligible, hard[eligible]))
    lse = te.take_rows(te.masked_logsumexp(logits, denom_mask), eligible)
    per_anchor = te.sub(lse, s_pos)
    out = te.mean(per_anchor)
    out.meta = {"eligible": eligible, "hardest": hard, "n": n, "per_anchor": per_anchor.data}
    return out


def _cross_entropy_rows(logits: Value, targets: np.ndarray) -> Value:
    return te.scale(te.sum_(te.mul_const(te.log_softmax(logits), targets)), -1.0 / logits.shape[0])


def clip_loss(batch: MatchBatch, temperature: float = 0.07) -> Value:
    if batch.n < 2:
        raise BatchError("CLIP loss needs at least two samples")
    logits = te.scale(te.matmul(batch.zhat_img, te.transpose(batch.zhat_txt)), 1.0 / temperature)
    eye = np.eye(batch.n)
    both = te.add(_cross_entropy_rows(logits, eye), _cross_entropy_rows(te.transpose(logits), eye))
    return te.scale(both, 0.5)


def soft_clip_loss(batch: MatchBatch, temperature: float = 0.07, alpha: float = 0.6) -> Value:
    if batch.n < 2:
        raise BatchError("Soft-CLIP loss needs at least two samples")
    logits = te.scale(te.matmul(batch.zhat_img, te.transpose(batch.zhat_txt)), 1.0 / temperature)
    q = soft_targets(batch.labels, alpha).q
    both = te.add(_cross_entropy_rows(logits, q), _cross_entropy_rows(te.transpose(logits), q.T))
    return te.scale(both, 0.5)
