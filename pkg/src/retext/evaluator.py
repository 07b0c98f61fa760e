"""Retrieval metrics (CMC Rank-k, mAP) and cross-domain evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datakit import Corpus
from .errors import ProtocolError

log = logging.getLogger(__name__)

LEDGER_COLUMNS = ("config", "domain", "Rank1", "Rank5", "mAP")


@dataclass
class RetrievalRun:
    """Query and gallery embeddings with (identity, camera) labels.

    Gallery entries sharing both identity and camera with a query are dropped
    from that query's ranking.  Queries left without any true match are
    skipped and counted in ``skipped``.
    """
    query: np.ndarray
    q_ids: np.ndarray
    q_cams: np.ndarray
    gallery: np.ndarray
    g_ids: np.ndarray
    g_cams: np.ndarray
    skipped: list[int] = field(default_factory=list, init=False)

    def __post_init__(self):
        self.query = np.atleast_2d(np.asarray(self.query, dtype=np.float64))
        self.gallery = np.atleast_2d(np.asarray(self.gallery, dtype=np.float64))
        for name in ("q_ids", "q_cams", "g_ids", "g_cams"):
            setattr(self, name, np.asarray(getattr(self, name)))
        if not (len(self.query) == len(self.q_ids) == len(self.q_cams)):
            raise ProtocolError("query embeddings and labels differ in length")
        if not (len(self.gallery) == len(self.g_ids) == len(self.g_cams)):
            raise ProtocolError("gallery embeddings and labels differ in length")
        self._dist = _cosine_distance(self.query, self.gallery)
        self.skipped = [q for q in range(len(self.query)) if not self.relevant(q, self.valid(q)).any()]

    def valid(self, q: int) -> np.ndarray:
        """Gallery indices eligible for query ``q`` in storage order."""
        same = (self.g_ids == self.q_ids[q]) & (self.g_cams == self.q_cams[q])
        return np.flatnonzero(~same)

    def relevant(self, q: int, gallery_idx: np.ndarray) -> np.ndarray:
        return self.g_ids[gallery_idx] == self.q_ids[q]

    def distances(self, q: int) -> np.ndarray:
        return self._dist[q]

    @property
    def scored(self) -> list[int]:
        skip = set(self.skipped)
        return [q for q in range(len(self.query)) if q not in skip]


def _cosine_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return 1.0 - an @ bn.T


def rank_gallery(run: RetrievalRun, query_index: int) -> np.ndarray:
    """Eligible gallery indices by ascending cosine distance, ties to the lower index."""
    idx = run.valid(query_index)
    d = run.distances(query_index)[idx]
    return idx[np.lexsort((idx, d))]


def _hits(run: RetrievalRun, q: int) -> np.ndarray:
    return run.relevant(q, rank_gallery(run, q))


def cmc(run: RetrievalRun, k: int) -> float:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    queries = run.scored
    if not queries:
        return 0.0
    found = sum(int(np.argmax(_hits(run, q)) < k) for q in queries)
    return found / len(queries)


def average_precision(hits: np.ndarray) -> float:
    hits = np.asarray(hits, dtype=bool)
    if not hits.any():
        return 0.0
    ranks = np.flatnonzero(hits) + 1
    # correctly rounded sums make the result independent of summation order
    return math.fsum(np.arange(1, len(ranks) + 1) / ranks) / len(ranks)


def mean_ap(run: RetrievalRun) -> float:
    queries = run.scored
    if not queries:
        return 0.0
    return math.fsum(average_precision(_hits(run, q)) for q in queries) / len(queries)


def metrics(run: RetrievalRun) -> dict[str, float]:
    if run.skipped:
        log.info("%d queries without a cross-camera match skipped", len(run.skipped))
    return {"Rank1": cmc(run, 1), "Rank5": cmc(run, 5), "mAP": mean_ap(run)}


def query_split(corpus: Corpus, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """One query per (identity, camera), chosen as the first under a seeded order."""
    cams = {r.camera for r in corpus.records}
    if len(cams) < 2 or None in cams:
        raise ProtocolError("cross-domain evaluation needs a target corpus with >= 2 cameras")
    order = np.random.default_rng(seed).permutation(len(corpus.records))
    seen: set[tuple[int, int]] = set()
    query = []
    for pos in order:
        r = corpus.records[pos]
        key = (r.identity, r.camera)
        if key not in seen:
            seen.add(key)
            query.append(int(pos))
    query = np.sort(np.array(query))
    gallery = np.setdiff1d(np.arange(len(corpus.records)), query)
    return query, gallery


def build_run(embeddings: np.ndarray, corpus: Corpus, seed: int = 0) -> RetrievalRun:
    q, g = query_split(corpus, seed)
    ids = np.array([r.identity for r in corpus.records])
    cams = np.array([r.camera for r in corpus.records])
    return RetrievalRun(embeddings[q], ids[q], cams[q], embeddings[g], ids[g], cams[g])


def evaluate_model(model, corpus: Corpus, seed: int = 0) -> dict[str, float]:
    """Embed ``corpus`` with the model's momentum encoder and score retrieval."""
    # fail on the protocol before spending time on embeddings
    query_split(corpus, seed)
    emb = model.embed_images(corpus.images(), momentum=True)
    return metrics(build_run(emb, corpus, seed))


def cross_domain_eval(checkpoint: str | Path, target: Corpus, seed: int = 0) -> dict[str, float]:
    from .trainer import load_checkpoint

    state = load_checkpoint(checkpoint)
    return evaluate_model(state.model, target, seed)


def append_ledger(path: str | Path, config_digest: str, domain: str, result: dict[str, float]):
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(LEDGER_COLUMNS)
        w.writerow([config_digest, domain] + [f"{result[k]:.6f}" for k in LEDGER_COLUMNS[2:]])


def read_ledger(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
