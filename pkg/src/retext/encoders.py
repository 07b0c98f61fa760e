"""Image encoder, momentum twin, text encoder and shared-space projection heads."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import layers
from . import tensor_engine as te
from .errors import ConfigError, StructuralError
from .tensor_engine import Value

log = logging.getLogger(__name__)

CLS, PAD, UNK = "[CLS]", "[PAD]", "[UNK]"
CLS_ID, PAD_ID, UNK_ID = 0, 1, 2


@dataclass
class ImageEncoderConfig:
    image_height: int = 64
    image_width: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4

    def __post_init__(self):
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def patch_count(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class Vocabulary:
    words: list[str]

    def __post_init__(self):
        if self.words[:3] != [CLS, PAD, UNK]:
            raise ConfigError("vocabulary must start with [CLS], [PAD], [UNK]")
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    @classmethod
    def build(cls, texts: Sequence[str]) -> "Vocabulary":
        words = sorted({w for t in texts for w in tokenize(t)})
        return cls([CLS, PAD, UNK] + [w for w in words if w not in (CLS, PAD, UNK)])


def tokenize(text: str) -> list[str]:
    return text.lower().replace(",", " ,").split()


@dataclass
class TextEncoderConfig:
    vocab: Vocabulary
    max_len: int = 16
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")


@dataclass
class TokenBatch:
    ids: np.ndarray
    empty: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def pad_mask(self) -> np.ndarray:
        return self.ids != PAD_ID


def encode_captions(captions: Sequence[str | None], vocab: Vocabulary, max_len: int) -> TokenBatch:
    """Whitespace-tokenize, prepend [CLS], map unknown words to [UNK], right-pad."""
    ids = np.full((len(captions), max_len), PAD_ID, dtype=np.int64)
    empty = np.zeros(len(captions), dtype=bool)
    for r, cap in enumerate(captions):
        toks = tokenize(cap or "")
        if not toks:
            empty[r] = True
        seq = [CLS_ID] + [vocab.index.get(w, UNK_ID) for w in toks]
        if len(seq) > max_len:
            raise ConfigError(f"caption of {len(seq)} tokens exceeds max_len {max_len}: {cap!r}")
        ids[r, :len(seq)] = seq
    return TokenBatch(ids, empty)


@dataclass
class EmbeddingBatch:
    h_img: Value
    z_img: Value
    zhat_img: Value
    h_txt: Value | None = None
    z_txt: Value | None = None
    zhat_txt: Value | None = None


def patchify(images, patch: int) -> Value:
    """(B, H, W, C) -> (B, patches, patch*patch*C), row-major over the grid."""
    images = te.as_value(images)
    b, h, w, c = images.shape
    x = te.reshape(images, (b, h // patch, patch, w // patch, patch, c))
    x = te.transpose(x, (0, 1, 3, 2, 4, 5))
    return te.reshape(x, (b, (h // patch) * (w // patch), patch * patch * c))


def unpatchify(patches, patch: int, height: int, width: int, channels: int = 3) -> Value:
    patches = te.as_value(patches)
    b = patches.shape[0]
    gh, gw = height // patch, width // patch
    x = te.reshape(patches, (b, gh, gw, patch, patch, channels))
    x = te.transpose(x, (0, 1, 3, 2, 4, 5))
    return te.reshape(x, (b, height, width, channels))


def patchify_np(images: np.ndarray, patch: int) -> np.ndarray:
    return patchify(images, patch).data


class ImageEncoder:
    """Tiny ViT: patch embedding, learned positions, [CLS] token, pre-norm blocks."""

    def __init__(self, cfg: ImageEncoderConfig, seed: int = 0, trainable: bool = True):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.embed_dim
        p: layers.Params = {}
        layers.init_linear(rng, p, "patch", cfg.patch_dim, d)
        p["cls"] = te.parameter(rng.normal(0, 0.02, size=(1, 1, d)))
        p["pos"] = te.parameter(rng.normal(0, 0.02, size=(1, cfg.patch_count + 1, d)))
        p["mask_token"] = te.parameter(rng.normal(0, 0.02, size=(d,)))
        for i in range(cfg.depth):
            layers.init_block(rng, p, f"blocks.{i}", d)
        layers.init_norm(p, "ln_f", d)
        self.params = p
        if not trainable:
            self.freeze()

    def freeze(self):
        for v in self.params.values():
            v.requires_grad = False
            v.grad = None

    @classmethod
    def momentum_copy(cls, online: "ImageEncoder") -> "ImageEncoder":
        enc = cls.__new__(cls)
        enc.cfg = online.cfg
        enc.params = {k: te.Value(v.data.copy()) for k, v in online.params.items()}
        return enc

    def forward(self, images, visible_mask: np.ndarray | None = None) -> tuple[Value, Value]:
        cfg = self.cfg
        images = te.as_value(images)
        if images.ndim != 4 or images.shape[1:] != (cfg.image_height, cfg.image_width, cfg.channels):
            raise ConfigError(
                f"image batch {images.shape} does not match "
                f"{(cfg.image_height, cfg.image_width, cfg.channels)}")
        b = images.shape[0]
        d = cfg.embed_dim
        tok = layers.linear(patchify(images, cfg.patch_size), self.params, "patch")
        if visible_mask is not None:
            vm = np.asarray(visible_mask, dtype=bool)
            if vm.ndim == 1:
                vm = np.broadcast_to(vm, (b, vm.shape[0]))
            if vm.shape != (b, cfg.patch_count):
                raise ConfigError(f"visible_mask {vm.shape} != {(b, cfg.patch_count)}")
            mask_tok = te.broadcast_to(self.params["mask_token"], tok.shape)
            tok = te.select(np.broadcast_to(vm[..., None], tok.shape), tok, mask_tok)
        cls_tok = te.broadcast_to(self.params["cls"], (b, 1, d))
        x = te.concat([cls_tok, tok], axis=1)
        x = te.add(x, te.broadcast_to(self.params["pos"], x.shape))
        for i in range(cfg.depth):
            x = layers.block(x, self.params, f"blocks.{i}", cfg.heads)
        x = layers.norm(x, self.params, "ln_f")
        return x, x[:, 0, :]


class TextEncoder:
    """Tiny transformer over whitespace tokens; padding is masked out of attention."""

    def __init__(self, cfg: TextEncoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.embed_dim
        p: layers.Params = {}
        p["tok"] = te.parameter(rng.normal(0, 0.02, size=(len(cfg.vocab), d)))
        p["pos"] = te.parameter(rng.normal(0, 0.02, size=(cfg.max_len, d)))
        for i in range(cfg.depth):
            layers.init_block(rng, p, f"blocks.{i}", d)
        layers.init_norm(p, "ln_f", d)
        self.params = p

    def forward(self, tokens: TokenBatch | np.ndarray) -> tuple[Value, Value, np.ndarray]:
        """Return (token states, CLS feature, key mask)."""
        ids = tokens.ids if isinstance(tokens, TokenBatch) else np.asarray(tokens)
        b, t = ids.shape
        if t > self.cfg.max_len:
            raise ConfigError(f"token sequence length {t} exceeds max_len {self.cfg.max_len}")
        key_mask = ids != PAD_ID
        x = te.embedding(self.params["tok"], ids)
        pos = te.getitem(self.params["pos"], slice(0, t))
        x = te.add(x, te.broadcast_to(pos, x.shape))
        for i in range(self.cfg.depth):
            x = layers.block(x, self.params, f"blocks.{i}", self.cfg.heads, key_mask=key_mask)
        x = layers.norm(x, self.params, "ln_f")
        return x, x[:, 0, :], key_mask


def encode_image(encoder: ImageEncoder, images, visible_mask=None) -> tuple[Value, Value]:
    return encoder.forward(images, visible_mask)


def encode_text(encoder: TextEncoder, tokens) -> Value:
    if isinstance(tokens, TokenBatch) and tokens.empty.any():
        log.debug("%d empty caption(s) encoded as [CLS] only", int(tokens.empty.sum()))
    return encoder.forward(tokens)[1]


def init_projection(embed_dim: int, proj_dim: int, seed: int) -> Value:
    rng = np.random.default_rng(seed)
    return te.parameter(rng.normal(0, 1.0 / np.sqrt(embed_dim), size=(proj_dim, embed_dim)))


def project(h: Value, weight: Value) -> tuple[Value, Value]:
    """z = h W^T (no bias) and its row-normalized version."""
    z = te.matmul(h, te.transpose(weight))
    return z, te.l2_normalize_rows(z)


def ema_update(online: Mapping[str, Value], momentum: Mapping[str, Value], m: float):
    """In-place ``momentum <- m * momentum + (1 - m) * online``."""
    if not 0.0 <= m <= 1.0:
        raise StructuralError(f"momentum coefficient {m} outside [0, 1]")
    if online.keys() != momentum.keys():
        raise StructuralError("parameter trees have different keys")
    for k, src in online.items():
        dst = momentum[k]
        if src.shape != dst.shape:
            raise StructuralError(f"{k}: shape {src.shape} vs {dst.shape}")
        mixed = m * dst.data + (1.0 - m) * src.data
        # keep the result a convex combination under rounding
        dst.data = np.clip(mixed, np.minimum(src.data, dst.data), np.maximum(src.data, dst.data))
