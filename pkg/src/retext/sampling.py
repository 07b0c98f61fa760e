"""PK mini-batch composition for mixed multi-camera / single-camera training.

Identities are consumed in rounds: each round is a seeded shuffle of the
eligible identities cut into consecutive groups of P, so no identity repeats
within a round.  Every draw is a pure function of (seed, batch index).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .datakit import Corpus, SampleRecord
from .errors import CompositionError, IngestionError, SamplerError

Index = Mapping[int, Mapping[int | None, Sequence[int]]]

_MULTI_SALT, _SINGLE_SALT = 1, 2


@dataclass
class SamplerConfig:
    P_m: int = 8
    K_m: int = 4
    P_s: int = 32
    K_s: int = 2
    seed: int = 0
    enforce_camera_diversity: bool = True
    use_multi: bool = True
    use_single: bool = True

    def __post_init__(self):
        for name in ("P_m", "K_m", "P_s", "K_s"):
            if getattr(self, name) < 1:
                raise SamplerError(f"{name} must be a positive integer")

    @property
    def multi_size(self) -> int:
        return self.P_m * self.K_m if self.use_multi else 0

    @property
    def single_size(self) -> int:
        return self.P_s * self.K_s if self.use_single else 0


@dataclass
class SampledPart:
    positions: list[int]
    labels: np.ndarray
    cameras: list[int | None]
    duplicated: set[int] = field(default_factory=set)       # identities drawn with replacement
    camera_shortfall: set[int] = field(default_factory=set)  # identities with < K cameras

    def __len__(self):
        return len(self.positions)


@dataclass
class ComposedBatch:
    multi: list[SampleRecord]
    single: list[SampleRecord]
    multi_part: SampledPart
    single_part: SampledPart
    epoch: int = 0
    step: int = 0

    @property
    def size(self) -> int:
        return len(self.multi) + len(self.single)

    def audit(self) -> dict:
        return {"multi": len(self.multi), "single": len(self.single), "total": self.size,
                "multi_ids": len(set(self.multi_part.labels.tolist())),
                "single_ids": len(set(self.single_part.labels.tolist())),
                "duplicated_ids": len(self.multi_part.duplicated | self.single_part.duplicated),
                "camera_shortfall_ids": len(self.multi_part.camera_shortfall)}


def _empty_part() -> SampledPart:
    return SampledPart([], np.zeros(0, dtype=np.int64), [])


def identity_round(ids: Sequence[int], seed: int, salt: int, round_no: int) -> list[int]:
    """Seeded Fisher-Yates shuffle of ``ids`` for one round."""
    out = list(ids)
    rng = np.random.default_rng([seed, salt, round_no])
    for i in range(len(out) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        out[i], out[j] = out[j], out[i]
    return out


def identities_for_batch(ids: Sequence[int], P: int, seed: int, salt: int, batch_index: int) -> list[int]:
    per_round = len(ids) // P
    if per_round == 0:
        raise SamplerError(f"need at least {P} identities, corpus has {len(ids)}")
    round_no, within = divmod(batch_index, per_round)
    order = identity_round(ids, seed, salt, round_no)
    return order[within * P:(within + 1) * P]


def _pick_camera_diverse(cams: Mapping, K: int, rng: np.random.Generator) -> tuple[list[int], bool]:
    keys = sorted(cams, key=lambda c: -1 if c is None else c)
    keys = [keys[i] for i in rng.permutation(len(keys))]
    pools = {c: list(rng.permutation(cams[c])) for c in keys}
    chosen: list[int] = []
    while len(chosen) < K and any(pools.values()):
        for c in keys:
            if len(chosen) == K:
                break
            if pools[c]:
                chosen.append(int(pools[c].pop()))
    replaced = False
    if len(chosen) < K:
        # every image used once already: refill with replacement, still cycling cameras
        replaced = True
        i = 0
        while len(chosen) < K:
            c = keys[i % len(keys)]
            chosen.append(int(cams[c][rng.integers(len(cams[c]))]))
            i += 1
    return chosen, replaced


def _pick_any(cams: Mapping, K: int, rng: np.random.Generator) -> tuple[list[int], bool]:
    pool = sorted(p for imgs in cams.values() for p in imgs)
    if len(pool) >= K:
        return [int(p) for p in rng.choice(pool, size=K, replace=False)], False
    return [int(p) for p in rng.choice(pool, size=K, replace=True)], True


def eligible_multi_ids(index: Index) -> list[int]:
    return sorted(i for i, cams in index.items() if sum(len(v) for v in cams.values()) >= 2)


def sample_multi(index: Index, cfg: SamplerConfig, batch_index: int) -> SampledPart:
    """P_m identities x K_m images, maximizing distinct cameras per identity."""
    ids = eligible_multi_ids(index)
    if len(ids) < cfg.P_m:
        raise SamplerError(f"multi-camera corpus has {len(ids)} identities with >= 2 images, "
                           f"need P_m = {cfg.P_m}")
    chosen_ids = identities_for_batch(ids, cfg.P_m, cfg.seed, _MULTI_SALT, batch_index)
    positions, labels, cameras = [], [], []
    part = _empty_part()
    for ident in chosen_ids:
        cams = index[ident]
        rng = np.random.default_rng([cfg.seed, _MULTI_SALT, batch_index, ident])
        if cfg.enforce_camera_diversity:
            picks, replaced = _pick_camera_diverse(cams, cfg.K_m, rng)
        else:
            picks, replaced = _pick_any(cams, cfg.K_m, rng)
        if replaced:
            part.duplicated.add(ident)
        if len(cams) < cfg.K_m:
            part.camera_shortfall.add(ident)
        cam_lookup = {p: c for c, imgs in cams.items() for p in imgs}
        positions += picks
        labels += [ident] * len(picks)
        cameras += [cam_lookup[p] for p in picks]
    part.positions, part.labels, part.cameras = positions, np.array(labels), cameras
    return part


def sample_single(index: Index, cfg: SamplerConfig, batch_index: int) -> SampledPart:
    """P_s identities x K_s images without camera constraints."""
    ids = sorted(index)
    if len(ids) < cfg.P_s:
        raise SamplerError(f"single-camera corpus has {len(ids)} identities, need P_s = {cfg.P_s}")
    chosen_ids = identities_for_batch(ids, cfg.P_s, cfg.seed, _SINGLE_SALT, batch_index)
    part = _empty_part()
    positions, labels = [], []
    for ident in chosen_ids:
        rng = np.random.default_rng([cfg.seed, _SINGLE_SALT, batch_index, ident])
        picks, replaced = _pick_any(index[ident], cfg.K_s, rng)
        if replaced:
            part.duplicated.add(ident)
        positions += picks
        labels += [ident] * len(picks)
    part.positions, part.labels, part.cameras = positions, np.array(labels), [None] * len(positions)
    return part


def compose(multi: list[SampleRecord], single: list[SampleRecord], cfg: SamplerConfig,
            multi_part: SampledPart | None = None, single_part: SampledPart | None = None,
            epoch: int = 0, step: int = 0) -> ComposedBatch:
    if len(multi) != cfg.multi_size:
        raise CompositionError(f"multi part has {len(multi)} records, config expects {cfg.multi_size}")
    if len(single) != cfg.single_size:
        raise CompositionError(f"single part has {len(single)} records, config expects {cfg.single_size}")
    return ComposedBatch(list(multi), list(single), multi_part or _empty_part(),
                         single_part or _empty_part(), epoch, step)


class BatchSampler:
    """Draws composed batches from a multi-camera and a captioned single-camera corpus.

    Steps per epoch are set by the multi-camera corpus; the single-camera
    stream cycles on its own counter (the global step).
    """

    def __init__(self, multi: Corpus | None, single: Corpus | None, cfg: SamplerConfig,
                 require_captions: bool = True):
        self.cfg = cfg
        self.multi = multi if cfg.use_multi else None
        self.single = single if cfg.use_single else None
        if cfg.use_multi and multi is None:
            raise SamplerError("use_multi is set but no multi-camera corpus given")
        if cfg.use_single and single is None:
            raise SamplerError("use_single is set but no single-camera corpus given")
        self._multi_index = self.multi.index if self.multi is not None else None
        self._single_index = self.single.index if self.single is not None else None
        if self.single is not None and require_captions:
            for pos, r in enumerate(self.single.records):
                if not r.caption:
                    raise IngestionError(f"single-camera record {pos} ({r.image_path}) has no caption")

    @property
    def steps_per_epoch(self) -> int:
        if self.multi is not None:
            n, per = len(self.multi), self.cfg.multi_size
        else:
            n, per = len(self.single), self.cfg.single_size
        return max(1, n // per)

    def batch(self, epoch: int, step: int) -> ComposedBatch:
        g = epoch * self.steps_per_epoch + step
        mp = sp = _empty_part()
        multi, single = [], []
        if self.multi is not None:
            mp = sample_multi(self._multi_index, self.cfg, g)
            multi = [self.multi.records[p] for p in mp.positions]
        if self.single is not None:
            sp = sample_single(self._single_index, self.cfg, g)
            single = [self.single.records[p] for p in sp.positions]
        return compose(multi, single, self.cfg, mp, sp, epoch, step)
