"""Finite-difference checks for every training loss on seeded micro-batches."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import match_losses as ml
from . import reid_losses as rl
from . import tensor_engine as te
from .config import TrainConfig
from .datakit import generate_corpus
from .encoders import (ImageEncoder, ImageEncoderConfig, TextEncoder, TextEncoderConfig,
                       Vocabulary, encode_captions)
from .reconstruction import Decoder, DecoderConfig, cosine_semantic_loss, make_mask, mse_masked, reconstruct
from .tensor_engine import GradReport, Value

SCOPES = ("reid", "match", "rec", "total")

# objective builder: seed -> (objective, params)
Builder = Callable[[int], tuple[Callable[[], Value], dict[str, Value]]]


@dataclass
class Case:
    name: str
    scope: str
    build: Builder


def _labels(rng: np.random.Generator, n_ids: int, per_id: int) -> np.ndarray:
    return rng.permutation(np.repeat(np.arange(n_ids), per_id))


def _emb(rng, n, d=6):
    return te.parameter(rng.normal(size=(n, d)))


def _reid_case(fn) -> Builder:
    def build(seed):
        rng = np.random.default_rng(seed)
        labels = _labels(rng, 3, 3)
        cams = np.zeros(9, dtype=int)
        for ident in range(3):
            where = np.flatnonzero(labels == ident)
            cams[where] = np.arange(len(where))  # each identity seen once by cameras 0, 1, 2
        e, ea = _emb(rng, 9), _emb(rng, 9)
        return (lambda: fn(rl.ReIDBatch(e, ea, labels, cams))), {"emb": e, "emb_aug": ea}
    return build


def _match_case(fn) -> Builder:
    def build(seed):
        rng = np.random.default_rng(seed)
        labels = _labels(rng, 4, 2)
        zi, zt = _emb(rng, 8), _emb(rng, 8)
        return (lambda: fn(ml.MatchBatch.from_projections(zi, zt, labels))), {"z_img": zi, "z_txt": zt}
    return build


_TINY_IMG = ImageEncoderConfig(16, 8, 4, 3, 8, 1, 2)


def _generic(params: dict[str, Value], rng: np.random.Generator, std: float = 0.4):
    """Redraw parameters away from the near-symmetric init so every path carries gradient."""
    for k, p in params.items():
        gain = k.endswith(".g")
        p.data = (1.0 if gain else 0.0) + rng.normal(0, 0.2 if gain else std, size=p.shape)


def _tiny_images(rng, n):
    return rng.uniform(size=(n, _TINY_IMG.image_height, _TINY_IMG.image_width, 3))


def _mse(seed):
    rng = np.random.default_rng(seed)
    plans = [make_mask(_TINY_IMG.patch_count, 0.75, seed * 10 + i) for i in range(3)]
    target = rng.uniform(size=(3, _TINY_IMG.patch_count, _TINY_IMG.patch_dim))
    pred = te.parameter(rng.uniform(size=target.shape))
    return (lambda: mse_masked(target, pred, plans)), {"pred": pred}


def _cos(seed):
    rng = np.random.default_rng(seed)
    enc = ImageEncoder(_TINY_IMG, seed=seed, trainable=False)
    _generic(enc.params, rng)
    # a dimmer original keeps the two CLS features apart, so no gradient entry sits at roundoff level
    orig = 0.3 * _tiny_images(rng, 3)
    recon = te.parameter(_tiny_images(rng, 3))
    return (lambda: cosine_semantic_loss(orig, recon, enc)), {"recon": recon}


def _tiny_text(seed):
    vocab = Vocabulary.build(["a person wearing red blue shirt pants"])
    return vocab, TextEncoder(TextEncoderConfig(vocab, 8, 8, 1, 2), seed=seed)


def _rec(seed):
    rng = np.random.default_rng(seed)
    enc = ImageEncoder(_TINY_IMG, seed=seed)
    dec = Decoder(DecoderConfig(8, 8, 2, 1, _TINY_IMG.patch_count, _TINY_IMG.patch_dim), 8, seed=seed + 1)
    vocab, txt = _tiny_text(seed + 2)
    for part in (enc.params, dec.params, txt.params):
        _generic(part, rng)
    mom = ImageEncoder.momentum_copy(enc)
    tokens = encode_captions(["a red shirt", "blue pants", "a person"], vocab, 8)
    images = _tiny_images(rng, 3)
    plans = [make_mask(_TINY_IMG.patch_count, 0.75, seed * 10 + i) for i in range(3)]

    def objective():
        states, _, mask = txt.forward(tokens)
        return reconstruct(images, plans, enc, dec, states, mask, mom).total
    params = {"image.patch.w": enc.params["patch.w"], "image.mask_token": enc.params["mask_token"],
              "decoder.pixel.w": dec.params["pixel.w"], "decoder.blocks.0.xattn.q.w":
              dec.params["blocks.0.xattn.q.w"], "text.tok": txt.params["tok"]}
    return objective, params


TINY_TRAIN = dict(image_height=16, image_width=8, patch_size=4, embed_dim=8, depth=1, heads=2,
                  proj_dim=6, text_depth=1, decoder_dim=8, decoder_depth=1,
                  P_m=2, K_m=2, P_s=2, K_s=2, epochs=1, warmup_epochs=0)

_TOTAL_PARAMS = ("image.patch.w", "image.blocks.0.mlp.fc1.w", "image.mask_token", "text.tok",
                 "text.blocks.0.attn.v.w", "decoder.pixel.w", "decoder.blocks.0.xattn.k.w",
                 "w_img", "w_txt")


def _total(seed):
    from .sampling import BatchSampler
    from .trainer import TrainState, forward_losses, sampler_config

    cfg = TrainConfig(seed=seed, **TINY_TRAIN)
    multi = generate_corpus(3, 2, 1, "source", seed=seed, height=16, width=8)
    single = generate_corpus(3, 1, 2, "single", seed=seed, with_captions=True, height=16, width=8,
                             id_offset=100)
    state = TrainState.create(cfg)
    rng = np.random.default_rng(seed)
    _generic(state.model.all_params(), rng)
    batch = BatchSampler(multi, single, sampler_config(cfg)).batch(0, 0)
    params = state.model.trainable()
    return (lambda: forward_losses(batch, state).total), {k: params[k] for k in _TOTAL_PARAMS}


CASES: list[Case] = [
    Case("L_ins", "reid", _reid_case(rl.instance_loss)),
    Case("L_aug", "reid", _reid_case(rl.augmentation_loss)),
    Case("L_cen", "reid", _reid_case(rl.centroids_loss)),
    Case("L_cc", "reid", _reid_case(rl.camera_centroids_loss)),
    Case("CLIP", "match", _match_case(ml.clip_loss)),
    Case("SoftCLIP", "match", _match_case(ml.soft_clip_loss)),
    Case("L_im", "match", _match_case(ml.identity_aware_matching_loss)),
    Case("L_sp", "match", _match_case(ml.structure_preserving_loss)),
    Case("L_mse", "rec", _mse),
    Case("L_cos", "rec", _cos),
    Case("L_rec", "rec", _rec),
    Case("total", "total", _total),
]


@dataclass
class CaseResult:
    name: str
    scope: str
    max_error: float
    batches: int
    seconds: float
    passed: bool

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} {self.name:<9} max_rel_err={self.max_error:.3e} "
                f"batches={self.batches} ({self.seconds:.1f}s)")


def run_case(case: Case, batches: int = 5, step: float = 1e-5, tol: float = 1e-4,
             n_coords: int = 32, seed: int = 0) -> CaseResult:
    t0 = time.perf_counter()
    worst = 0.0
    for b in range(batches):
        objective, params = case.build(seed + b)
        report: GradReport = te.check_gradients(objective, params, step=step, tol=tol,
                                                n_coords=n_coords, seed=seed + b)
        worst = max(worst, report.max_error)
    return CaseResult(case.name, case.scope, worst, batches, time.perf_counter() - t0, worst < tol)


def select_cases(scope: str | None = None, cases: list[Case] | None = None) -> list[Case]:
    cases = CASES if cases is None else cases
    if scope in (None, "all"):
        return list(cases)
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; choose from {SCOPES + ('all',)}")
    return [c for c in cases if c.scope == scope]


def run_suite(scope: str | None = None, batches: int = 5, step: float = 1e-5, tol: float = 1e-4,
              n_coords: int = 32, cases: list[Case] | None = None) -> list[CaseResult]:
    return [run_case(c, batches, step, tol, n_coords) for c in select_cases(scope, cases)]
