"""Batch-local Re-ID objectives on multi-camera data.

Four InfoNCE-style terms over cosine similarities of unit-normalized
embeddings (instance, augmentation, identity centroids, camera centroids),
combined as ``ins + aug + cen + 0.5 * cc``.  No cross-batch memory is kept.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor_engine as te
from .errors import BatchError
from .tensor_engine import Value

log = logging.getLogger(__name__)

CC_WEIGHT = 0.5


@dataclass
class ReIDBatch:
    emb: Value
    emb_aug: Value | None
    labels: np.ndarray
    cameras: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        self.cameras = np.asarray(self.cameras)
        n = self.emb.shape[0]
        if self.emb_aug is not None and self.emb_aug.shape != self.emb.shape:
            raise BatchError(f"emb {self.emb.shape} and emb_aug {self.emb_aug.shape} not row-aligned")
        if self.labels.shape != (n,) or self.cameras.shape != (n,):
            raise BatchError("labels/cameras must have one entry per embedding row")


@dataclass
class CentroidSet:
    ids: np.ndarray
    centroids: Value
    cam_keys: np.ndarray          # (m, 2) of (identity, camera)
    cam_centroids: Value


def _group_mean(x: Value, groups: np.ndarray) -> tuple[np.ndarray, Value]:
    """Renormalized group means of the unit rows ``x``.

    The mean is taken around each group's first member, so a group of
    identical rows returns that row bit for bit; such groups also skip the
    renormalization (their mean is already unit length).
    """
    keys, inverse = np.unique(groups, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    n = x.shape[0]
    member = np.zeros((len(keys), n))
    member[inverse, np.arange(n)] = 1.0
    member /= member.sum(axis=1, keepdims=True)
    first = np.array([np.flatnonzero(inverse == g)[0] for g in range(len(keys))])
    offsets = te.sub(x, te.take_rows(x, first[inverse]))
    mean = te.add(te.take_rows(x, first), te.matmul(te.constant(member), offsets))
    uniform = np.array([(x.data[inverse == g] == x.data[first[g]]).all() for g in range(len(keys))])
    cond = np.broadcast_to(uniform[:, None], mean.shape)
    return keys, te.select(cond, mean, te.l2_normalize_rows(mean))


def compute_centroids(batch: ReIDBatch) -> CentroidSet:
    """Renormalized means of normalized embeddings per identity and per (identity, camera)."""
    e = te.l2_normalize_rows(batch.emb)
    ids, cen = _group_mean(e, batch.labels)
    pairs = np.stack([batch.labels, batch.cameras], axis=1)
    cam_keys, cam_cen = _group_mean(e, pairs)
    return CentroidSet(ids, cen, cam_keys, cam_cen)


def _masked_nce(logits: Value, pos: np.ndarray, denom: np.ndarray, rows: np.ndarray) -> Value:
    lse_pos = te.take_rows(te.masked_logsumexp(logits, pos), rows)
    lse_all = te.take_rows(te.masked_logsumexp(logits, denom), rows)
    return te.mean(te.sub(lse_all, lse_pos))


def _zero(skipped: int) -> Value:
    out = te.constant(0.0)
    out.meta = {"skipped": skipped}
    return out


def instance_loss(batch: ReIDBatch, tau: float = 0.05) -> Value:
    """Multi-positive InfoNCE: same-label samples over all other samples."""
    e = te.l2_normalize_rows(batch.emb)
    n = e.shape[0]
    logits = te.scale(te.matmul(e, te.transpose(e)), 1.0 / tau)
    not_self = ~np.eye(n, dtype=bool)
    pos = (batch.labels[:, None] == batch.labels[None, :]) & not_self
    rows = np.flatnonzero(pos.any(axis=1))
    skipped = n - rows.size
    if skipped:
        log.warning("instance loss: %d anchor(s) without a positive skipped", skipped)
    if rows.size == 0:
        return _zero(skipped)
    out = _masked_nce(logits, pos, not_self, rows)
    out.meta = {"skipped": skipped}
    return out


def augmentation_loss(batch: ReIDBatch, tau: float = 0.05) -> Value:
    """Each original against all augmented views, its own twin as the positive."""
    if batch.emb_aug is None:
        raise BatchError("augmentation loss needs emb_aug")
    e = te.l2_normalize_rows(batch.emb)
    a = te.l2_normalize_rows(batch.emb_aug)
    n = e.shape[0]
    logp = te.log_softmax(te.scale(te.matmul(e, te.transpose(a)), 1.0 / tau))
    return te.scale(te.sum_(te.mul_const(logp, np.eye(n))), -1.0 / n)


def centroids_loss(batch: ReIDBatch, centroids: CentroidSet | None = None, tau: float = 0.05) -> Value:
    """Each embedding against every identity centroid, its own as the positive."""
    c = centroids or compute_centroids(batch)
    e = te.l2_normalize_rows(batch.emb)
    n = e.shape[0]
    logp = te.log_softmax(te.scale(te.matmul(e, te.transpose(c.centroids)), 1.0 / tau))
    own = (batch.labels[:, None] == c.ids[None, :]).astype(np.float64)
    return te.scale(te.sum_(te.mul_const(logp, own)), -1.0 / n)


def camera_centroids_loss(batch: ReIDBatch, centroids: CentroidSet | None = None,
                          tau: float = 0.05) -> Value:
    """Pull each sample toward its identity's centroids under the other cameras.

    Negatives are every centroid of another identity.  Identities seen under a
    single camera contribute nothing.
    """
    c = centroids or compute_centroids(batch)
    e = te.l2_normalize_rows(batch.emb)
    n = e.shape[0]
    key_id, key_cam = c.cam_keys[:, 0], c.cam_keys[:, 1]
    same_id = batch.labels[:, None] == key_id[None, :]
    pos = same_id & (batch.cameras[:, None] != key_cam[None, :])
    denom = pos | ~same_id
    rows = np.flatnonzero(pos.any(axis=1))
    skipped = n - rows.size
    if rows.size == 0:
        log.warning("camera-centroid loss: no identity spans two cameras, term is zero")
        return _zero(skipped)
    logits = te.scale(te.matmul(e, te.transpose(c.cam_centroids)), 1.0 / tau)
    out = _masked_nce(logits, pos, denom, rows)
    out.meta = {"skipped": skipped}
    return out


def combine_reid(ins: Value, aug: Value, cen: Value, cc: Value) -> Value:
    return te.add(te.add(te.add(ins, aug), cen), te.scale(cc, CC_WEIGHT))


def reid_total(batch: ReIDBatch, tau: float = 0.05) -> Value:
    cents = compute_centroids(batch)
    return combine_reid(
        instance_loss(batch, tau),
        augmentation_loss(batch, tau),
        centroids_loss(batch, cents, tau),
        camera_centroids_loss(batch, cents, tau),
    )
