"""Text-guided masked image reconstruction."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers
from . import tensor_engine as te
from .encoders import ImageEncoder, patchify, unpatchify
from .errors import ConfigError, ParameterError
from .tensor_engine import Value

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskPlan:
    masked_indices: np.ndarray
    visible_indices: np.ndarray
    ratio: float
    seed: int

    @property
    def patch_count(self) -> int:
        return len(self.masked_indices) + len(self.visible_indices)

    def visible_mask(self) -> np.ndarray:
        vm = np.ones(self.patch_count, dtype=bool)
        vm[self.masked_indices] = False
        return vm

    def __eq__(self, other):
        return (isinstance(other, MaskPlan) and self.ratio == other.ratio and self.seed == other.seed
                and np.array_equal(self.masked_indices, other.masked_indices)
                and np.array_equal(self.visible_indices, other.visible_indices))


def make_mask(patch_count: int, ratio: float = 0.75, seed: int = 0) -> MaskPlan:
    if patch_count < 2:
        raise ParameterError(f"patch_count must be >= 2, got {patch_count}")
    if not 0.0 < ratio < 1.0:
        raise ParameterError(f"mask ratio must lie in (0, 1), got {ratio}")
    m = int(round(ratio * patch_count))
    if m == 0 or m == patch_count:
        raise ParameterError(f"ratio {ratio} masks {m} of {patch_count} patches")
    perm = np.random.default_rng(seed).permutation(patch_count)
    return MaskPlan(np.sort(perm[:m]), np.sort(perm[m:]), ratio, seed)


@dataclass
class DecoderConfig:
    embed_dim: int = 64
    text_dim: int = 64
    heads: int = 4
    depth: int = 4
    patch_count: int = 32
    patch_dim: int = 192

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"decoder embed_dim {self.embed_dim} not divisible by heads {self.heads}")


class Decoder:
    """Self-attention, cross-attention over text tokens, feed-forward; then a pixel head."""

    def __init__(self, cfg: DecoderConfig, encoder_dim: int, seed: int = 0):
        self.cfg = cfg
        self.encoder_dim = encoder_dim
        rng = np.random.default_rng(seed)
        d = cfg.embed_dim
        p: layers.Params = {}
        layers.init_linear(rng, p, "embed", encoder_dim, d)
        layers.init_linear(rng, p, "text_embed", cfg.text_dim, d)
        p["pos"] = te.parameter(rng.normal(0, 0.02, size=(1, cfg.patch_count + 1, d)))
        for i in range(cfg.depth):
            layers.init_block(rng, p, f"blocks.{i}", d, cross=True)
        layers.init_norm(p, "ln_f", d)
        layers.init_linear(rng, p, "pixel", d, cfg.patch_dim)
        self.params = p

    def forward(self, tokens: Value, text_tokens: Value, text_mask: np.ndarray | None = None) -> Value:
        cfg = self.cfg
        if tokens.ndim != 3 or tokens.shape[1:] != (cfg.patch_count + 1, self.encoder_dim):
            raise ConfigError(f"decoder expects (B, {cfg.patch_count + 1}, {self.encoder_dim}) "
                              f"tokens, got {tokens.shape}")
        if text_tokens.ndim != 3 or text_tokens.shape[0] != tokens.shape[0] \
                or text_tokens.shape[2] != cfg.text_dim:
            raise ConfigError(f"text tokens {text_tokens.shape} incompatible with {tokens.shape}")
        x = layers.linear(tokens, self.params, "embed")
        x = te.add(x, te.broadcast_to(self.params["pos"], x.shape))
        ctx = layers.linear(text_tokens, self.params, "text_embed")
        for i in range(cfg.depth):
            x = layers.block(x, self.params, f"blocks.{i}", cfg.heads,
                             context=ctx, context_mask=text_mask)
        x = layers.norm(x, self.params, "ln_f")
        x = te.getitem(x, (slice(None), slice(1, None)))
        return layers.linear(x, self.params, "pixel")


def decode(decoder: Decoder, tokens: Value, text_tokens: Value, text_mask=None) -> Value:
    return decoder.forward(tokens, text_tokens, text_mask)


def _masked_pairs(plans: Sequence[MaskPlan]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows, cols, weights = [], [], []
    for b, plan in enumerate(plans):
        m = len(plan.masked_indices)
        if m == 0:
            raise ParameterError("mask plan has no masked patches")
        rows.extend([b] * m)
        cols.extend(plan.masked_indices.tolist())
        weights.extend([1.0 / m] * m)
    return np.array(rows), np.array(cols), np.array(weights)


def mse_masked(original_patches, predicted_patches: Value,
               plans: MaskPlan | Sequence[MaskPlan]) -> Value:
    """Mean over masked patches of the squared L2 patch error, averaged over the batch.

    Only masked positions are gathered, so predictions at visible positions
    never enter the computation.
    """
    if isinstance(plans, MaskPlan):
        plans = [plans]
    original = te.as_value(original_patches)
    if original.shape != predicted_patches.shape:
        raise ConfigError(f"patch shapes differ: {original.shape} vs {predicted_patches.shape}")
    if original.ndim == 2:
        original = te.reshape(original, (1,) + original.shape)
        predicted_patches = te.reshape(predicted_patches, (1,) + predicted_patches.shape)
    if len(plans) != original.shape[0]:
        raise ConfigError(f"{len(plans)} mask plans for batch of {original.shape[0]}")
    rows, cols, w = _masked_pairs(plans)
    diff = te.sub(te.getitem(predicted_patches, (rows, cols)), te.getitem(original, (rows, cols)))
    per_patch = te.sum_(te.mul(diff, diff), axis=-1)
    return te.scale(te.sum_(te.mul_const(per_patch, w)), 1.0 / len(plans))


def assemble(original_patches: np.ndarray, predicted_patches: Value,
             plans: Sequence[MaskPlan]) -> Value:
    """Ground-truth visible patches with predicted patches in the masked slots."""
    vis = np.stack([p.visible_mask() for p in plans])
    cond = np.broadcast_to(vis[..., None], predicted_patches.shape)
    return te.select(cond, te.constant(original_patches), predicted_patches)


def cosine_semantic_loss(original_images: np.ndarray, reconstructed_images: Value,
                         momentum_encoder: ImageEncoder, eps: float = 1e-12) -> Value:
    """Mean of ``1 - cos`` between momentum-encoder CLS features of x and x_hat.

    The x branch is a constant; gradients reach ``reconstructed_images`` but
    never the momentum parameters.
    """
    with te.no_grad():
        _, cls_x = momentum_encoder.forward(original_images)
    _, cls_r = momentum_encoder.forward(reconstructed_images)
    a = te.l2_normalize_rows(cls_x, eps)
    b = te.l2_normalize_rows(cls_r, eps)
    bad = a.meta["degenerate"] | b.meta["degenerate"]
    keep = np.flatnonzero(~bad)
    if bad.any():
        log.warning("cosine loss: %d sample(s) with degenerate CLS norm skipped", int(bad.sum()))
    if keep.size == 0:
        out = te.constant(0.0)
    else:
        cos = te.dot_rows(te.take_rows(b, keep), te.constant(a.data[keep]))
        out = te.sub(te.constant(1.0), te.mean(cos))
    out.meta = {"skipped": np.flatnonzero(bad)}
    return out


def reconstruction_loss(mse: Value, cos: Value) -> Value:
    return te.add(mse, cos)


@dataclass
class ReconstructionOutput:
    predicted: Value
    reconstructed: Value
    mse: Value
    cos: Value
    total: Value


def reconstruct(images: np.ndarray, plans: Sequence[MaskPlan], encoder: ImageEncoder,
                decoder: Decoder, text_tokens: Value, text_mask: np.ndarray,
                momentum_encoder: ImageEncoder, encoded: Value | None = None) -> ReconstructionOutput:
    """Full forward of the reconstruction task for a batch of images."""
    cfg = encoder.cfg
    if encoded is None:
        vis = np.stack([p.visible_mask() for p in plans])
        encoded, _ = encoder.forward(images, vis)
    pred = decoder.forward(encoded, text_tokens, text_mask)
    target = patchify(images, cfg.patch_size).data
    mse = mse_masked(target, pred, plans)
    recon = unpatchify(assemble(target, pred, plans), cfg.patch_size,
                       cfg.image_height, cfg.image_width, cfg.channels)
    cos = cosine_semantic_loss(images, recon, momentum_encoder)
    return ReconstructionOutput(pred, recon, mse, cos, reconstruction_loss(mse, cos))


def masked_view(image: np.ndarray, plan: MaskPlan, patch: int, fill: float = 0.5) -> np.ndarray:
    out = image.copy()
    gw = image.shape[1] // patch
    for idx in plan.masked_indices:
        r, c = divmod(int(idx), gw)
        out[r * patch:(r + 1) * patch, c * patch:(c + 1) * patch] = fill
    return out


def dump_triplets(out_dir: str | Path, originals: np.ndarray, plans: Sequence[MaskPlan],
                  reconstructed: np.ndarray, patch: int, captions: Sequence[str] | None = None,
                  scale: int = 4) -> list[Path]:
    """Write (original | masked | reconstructed) strips as PNG files."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (img, plan, rec) in enumerate(zip(originals, plans, reconstructed)):
        strip = np.concatenate([img, masked_view(img, plan, patch), np.clip(rec, 0, 1)], axis=1)
        arr = (np.clip(strip, 0, 1) * 255).round().astype(np.uint8)
        pil = Image.fromarray(arr).resize((arr.shape[1] * scale, arr.shape[0] * scale), Image.NEAREST)
        path = out_dir / f"recon_{i:03d}.png"
        pil.save(path)
        paths.append(path)
    if captions is not None:
        (out_dir / "captions.txt").write_text(
            "".join(f"recon_{i:03d}.png\t{c}\n" for i, c in enumerate(captions)))
    return paths
