"""Joint three-task optimization: Re-ID, image-text matching, reconstruction."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import match_losses as ml
from . import reid_losses as rl
from . import tensor_engine as te
from .config import TrainConfig
from .datakit import Corpus, augment_batch, grammar_words
from .encoders import (ImageEncoder, ImageEncoderConfig, TextEncoder, TextEncoderConfig,
                       Vocabulary, ema_update, encode_captions, init_projection, project)
from .errors import CheckpointError, ConfigError, NonFiniteLossError
from .reconstruction import Decoder, DecoderConfig, make_mask, reconstruct
from .sampling import BatchSampler, ComposedBatch, SamplerConfig
from .tensor_engine import Value

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "lr", "L_reid", "L_im", "L_sp", "L_mse", "L_cos", "total")


class ReTextModel:
    """Online image encoder, its momentum twin, text encoder, decoder, projection heads."""

    def __init__(self, cfg: TrainConfig, vocab: Vocabulary | None = None):
        self.cfg = cfg
        self.vocab = vocab or Vocabulary.build([" ".join(grammar_words())])
        icfg = ImageEncoderConfig(cfg.image_height, cfg.image_width, cfg.patch_size, 3,
                                  cfg.embed_dim, cfg.depth, cfg.heads)
        tcfg = TextEncoderConfig(self.vocab, cfg.text_max_len, cfg.embed_dim, cfg.text_depth, cfg.heads)
        dcfg = DecoderConfig(cfg.decoder_dim, cfg.embed_dim, cfg.heads, cfg.decoder_depth,
                             icfg.patch_count, icfg.patch_dim)
        s = cfg.seed * 1000
        self.image = ImageEncoder(icfg, seed=s + 1)
        self.momentum = ImageEncoder.momentum_copy(self.image)
        self.text = TextEncoder(tcfg, seed=s + 2)
        self.decoder = Decoder(dcfg, cfg.embed_dim, seed=s + 3)
        self.w_img = init_projection(cfg.embed_dim, cfg.proj_dim, seed=s + 4)
        self.w_txt = init_projection(cfg.embed_dim, cfg.proj_dim, seed=s + 5)

    def trainable(self) -> dict[str, Value]:
        out = {f"image.{k}": v for k, v in self.image.params.items()}
        out.update({f"text.{k}": v for k, v in self.text.params.items()})
        out.update({f"decoder.{k}": v for k, v in self.decoder.params.items()})
        out["w_img"] = self.w_img
        out["w_txt"] = self.w_txt
        return out

    def all_params(self) -> dict[str, Value]:
        out = self.trainable()
        out.update({f"momentum.{k}": v for k, v in self.momentum.params.items()})
        return out

    def embed_images(self, images: np.ndarray, batch: int = 128, momentum: bool = True) -> np.ndarray:
        """Normalized shared-space projections, from the momentum encoder by default."""
        enc = self.momentum if momentum else self.image
        chunks = []
        with te.no_grad():
            for i in range(0, len(images), batch):
                _, cls = enc.forward(images[i:i + batch])
                chunks.append(project(cls, self.w_img)[1].data)
        return np.concatenate(chunks) if chunks else np.zeros((0, self.cfg.proj_dim))


class AdamW:
    """Adam with decoupled weight decay: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``."""

    def __init__(self, params: dict[str, Value], weight_decay: float = 0.02,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = p.data - lr * self.weight_decay * p.data - lr * update

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainState:
    cfg: TrainConfig
    model: ReTextModel
    optimizer: AdamW
    epoch: int = 0
    step: int = 0
    global_step: int = 0

    @classmethod
    def create(cls, cfg: TrainConfig) -> "TrainState":
        model = ReTextModel(cfg)
        return cls(cfg, model, AdamW(model.trainable(), weight_decay=cfg.weight_decay))


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warm-up from 0 over ``warmup_epochs`` worth of steps, then constant."""
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.lr * (step / warm)
    return cfg.lr


def sampler_config(cfg: TrainConfig) -> SamplerConfig:
    return SamplerConfig(cfg.P_m, cfg.K_m, cfg.P_s, cfg.K_s, cfg.seed,
                         use_multi=cfg.use_multi, use_single=cfg.use_single)


def _seeds(cfg: TrainConfig, global_step: int, salt: int, n: int) -> list[int]:
    rng = np.random.default_rng([cfg.seed, salt, global_step])
    return [int(s) for s in rng.integers(0, 2 ** 31, size=n)]


@dataclass
class StepLosses:
    components: dict[str, Value] = field(default_factory=dict)
    total: Value | None = None

    def values(self) -> dict[str, float]:
        out = {k: v.item() for k, v in self.components.items()}
        out["total"] = self.total.item() if self.total is not None else 0.0
        return out


def _match_loss(cfg: TrainConfig, batch: ml.MatchBatch) -> Value:
    if cfg.match_loss == "clip":
        return ml.clip_loss(batch, cfg.clip_temperature)
    if cfg.match_loss == "soft_clip":
        return ml.soft_clip_loss(batch, cfg.clip_temperature, cfg.alpha)
    return ml.identity_aware_matching_loss(batch, cfg.alpha, cfg.eps_im, cfg.normalize_query)


def _single_reid(cfg: TrainConfig, emb: Value, emb_aug: Value, labels: np.ndarray) -> Value:
    batch = rl.ReIDBatch(emb, emb_aug, labels, np.full(len(labels), -1))
    parts = {
        "ins": lambda: rl.instance_loss(batch, cfg.tau_reid),
        "aug": lambda: rl.augmentation_loss(batch, cfg.tau_reid),
        "cen": lambda: rl.centroids_loss(batch, None, cfg.tau_reid),
    }
    chosen = list(parts) if cfg.reid_placement == "all" else [cfg.reid_placement]
    out = parts[chosen[0]]()
    for name in chosen[1:]:
        out = te.add(out, parts[name]())
    return out


def forward_losses(batch: ComposedBatch, state: TrainState) -> StepLosses:
    """Build the graphs of every enabled task.  Disabled tasks build nothing."""
    cfg, model = state.cfg, state.model
    g = state.global_step
    res = StepLosses()
    single_reid = cfg.reid and cfg.reid_placement != "none" and len(batch.single) > 0
    need_plain = len(batch.single) > 0 and (cfg.itm or single_reid)
    need_masked = len(batch.single) > 0 and cfg.ir
    do_multi = cfg.reid and len(batch.multi) > 0
    if cfg.reid and cfg.reid_placement == "none" and len(batch.multi) == 0:
        raise ConfigError("reid enabled but the batch has no multi-camera part")

    # one encoder pass over every image this step needs
    chunks, masks, spans = [], [], {}
    pc = model.image.cfg.patch_count

    def add_chunk(name, images, vis=None):
        start = sum(len(c) for c in chunks)
        chunks.append(images)
        masks.append(np.ones((len(images), pc), dtype=bool) if vis is None else vis)
        spans[name] = slice(start, start + len(images))

    if do_multi:
        imgs = np.stack([r.image for r in batch.multi])
        add_chunk("multi", imgs)
        add_chunk("multi_aug", augment_batch(imgs, _seeds(cfg, g, 11, len(imgs))))
    if need_plain or need_masked:
        s_imgs = np.stack([r.image for r in batch.single])
    if need_plain:
        add_chunk("single", s_imgs)
        if single_reid and cfg.reid_placement in ("all", "aug"):
            add_chunk("single_aug", augment_batch(s_imgs, _seeds(cfg, g, 12, len(s_imgs))))
    plans = None
    if need_masked:
        plans = [make_mask(pc, cfg.mask_ratio, s) for s in _seeds(cfg, g, 13, len(s_imgs))]
        add_chunk("masked", s_imgs, np.stack([p.visible_mask() for p in plans]))
    if not chunks:
        return res

    all_imgs = np.concatenate(chunks)
    vis = np.concatenate(masks)
    tokens, cls = model.image.forward(all_imgs, None if vis.all() else vis)
    z, _ = project(cls, model.w_img)

    def rows(name):
        sl = spans[name]
        return te.getitem(z, slice(sl.start, sl.stop))

    reid_total = None
    if do_multi:
        labels = batch.multi_part.labels
        cams = np.array([-1 if c is None else c for c in batch.multi_part.cameras])
        rb = rl.ReIDBatch(rows("multi"), rows("multi_aug"), labels, cams)
        reid_total = rl.reid_total(rb, cfg.tau_reid)
    if single_reid:
        aug = rows("single_aug") if "single_aug" in spans else None
        extra = _single_reid(cfg, rows("single"), aug, batch.single_part.labels)
        reid_total = extra if reid_total is None else te.add(reid_total, extra)
    if reid_total is not None:
        res.components["L_reid"] = reid_total

    text_tokens = text_mask = None
    if cfg.itm or need_masked:
        tb = encode_captions([r.caption for r in batch.single], model.vocab, cfg.text_max_len)
        text_tokens, text_cls, text_mask = model.text.forward(tb)
    if cfg.itm and len(batch.single) > 0:
        z_txt, _ = project(text_cls, model.w_txt)
        mb = ml.MatchBatch.from_projections(rows("single"), z_txt, batch.single_part.labels)
        res.components["L_im"] = _match_loss(cfg, mb)
        if cfg.use_sp:
            res.components["L_sp"] = ml.structure_preserving_loss(
                mb, cfg.tau_sp, include_positive_in_denominator=cfg.sp_denominator == "infonce")
    if need_masked:
        sl = spans["masked"]
        enc = te.getitem(tokens, slice(sl.start, sl.stop))
        out = reconstruct(s_imgs, plans, model.image, model.decoder, text_tokens, text_mask,
                          model.momentum, encoded=enc)
        res.components["L_mse"] = out.mse
        res.components["L_cos"] = out.cos

    for name, v in res.components.items():
        val = v.item()
        if not math.isfinite(val):
            raise NonFiniteLossError(name, val)
    total = None
    for v in res.components.values():
        total = v if total is None else te.add(total, v)
    res.total = total
    return res


def apply_update(state: TrainState, lr: float):
    state.optimizer.step(lr)
    state.optimizer.zero_grad()
    ema_update(state.model.image.params, state.model.momentum.params, state.cfg.ema_m)


def train_step(batch: ComposedBatch, state: TrainState, steps_per_epoch: int) -> dict[str, float]:
    """Forward all tasks, one backward over the sum, AdamW step, then EMA."""
    lr = lr_at(state.global_step, state.cfg, steps_per_epoch)
    losses = forward_losses(batch, state)
    report = losses.values()
    report["lr"] = lr
    if losses.total is not None and losses.total.requires_grad:
        state.optimizer.zero_grad()
        losses.total.backward()
        apply_update(state, lr)
    return report


def log_row(report: dict, step: int) -> dict:
    row = {"step": step, "lr": report["lr"]}
    for col in LOG_COLUMNS[2:]:
        row[col] = report.get(col, 0.0)
    return row


class Trainer:
    """Owns a training state and the batch stream; steps through epochs."""

    def __init__(self, cfg: TrainConfig, multi: Corpus | None, single: Corpus | None,
                 state: TrainState | None = None):
        self.cfg = cfg
        self.state = state or TrainState.create(cfg)
        self.sampler = BatchSampler(multi, single, sampler_config(cfg),
                                    require_captions=cfg.itm or cfg.ir)

    @property
    def steps_per_epoch(self) -> int:
        return self.sampler.steps_per_epoch

    def step(self) -> dict:
        st = self.state
        batch = self.sampler.batch(st.epoch, st.step)
        report = train_step(batch, st, self.steps_per_epoch)
        row = log_row(report, st.global_step)
        st.global_step += 1
        st.step += 1
        if st.step >= self.steps_per_epoch:
            st.step = 0
            st.epoch += 1
        return row

    def done(self) -> bool:
        return self.state.epoch >= self.cfg.epochs


@dataclass
class RunResult:
    checkpoint: Path | None
    log: list[dict]
    seconds: float
    state: TrainState


def run(cfg: TrainConfig, multi: Corpus | None, single: Corpus | None,
        out_dir: str | Path | None = None, resume: bool = True,
        on_step: Callable[[dict], None] | None = None) -> RunResult:
    """Train for ``cfg.epochs``; write a CSV loss log and periodic checkpoints.

    With ``resume`` and an existing ``last.ckpt`` under ``out_dir`` training
    continues from the saved counters.
    """
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    state = None
    rows: list[dict] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "last.ckpt"
        if resume and ckpt.exists():
            state = load_checkpoint(ckpt)
            if state.cfg.as_dict() != cfg.as_dict():
                raise CheckpointError(f"{ckpt} was written with a different config")
            log.info("resuming from %s at epoch %d step %d", ckpt, state.epoch, state.step)
            log_path = out / "loss_log.csv"
            if log_path.exists():
                rows = [dict(r) for r in csv.DictReader(log_path.open())]
                rows = [r for r in rows if int(r["step"]) < state.global_step]
    trainer = Trainer(cfg, multi, single, state)
    last = None
    while not trainer.done():
        row = trainer.step()
        rows.append(row)
        if on_step:
            on_step(row)
        st = trainer.state
        if out is not None and st.step == 0 and st.epoch % cfg.checkpoint_every == 0:
            write_log(rows, out / "loss_log.csv")
            last = save_checkpoint(st, out / "last.ckpt")
    if out is not None:
        write_log(rows, out / "loss_log.csv")
        last = save_checkpoint(trainer.state, out / "last.ckpt")
    return RunResult(last, rows, time.perf_counter() - t0, trainer.state)


def write_log(rows: list[dict], path: Path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in LOG_COLUMNS})


# -- checkpoints -----------------------------------------------------------

MAGIC = b"RTXCKPT\x00"
FORMAT_VERSION = 1


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """Binary layout (all little-endian):

    magic[8] | version u32 | header_len u64 | header JSON | float64 payload | sha256[32]
    """
    path = Path(path)
    tensors: dict[str, np.ndarray] = {k: v.data for k, v in state.model.all_params().items()}
    for k in state.optimizer.params:
        tensors[f"opt.m.{k}"] = state.optimizer.m[k]
        tensors[f"opt.v.{k}"] = state.optimizer.v[k]
    table, offset, blobs = [], 0, []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({
        "config": state.cfg.as_dict(),
        "counters": {"epoch": state.epoch, "step": state.step, "global_step": state.global_step,
                     "adam_t": state.optimizer.t},
        "vocab": state.model.vocab.words,
        "tensors": table,
    }, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> TrainState:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 + 32 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: content digest mismatch")
    version, hlen = struct.unpack("<IQ", body[len(MAGIC):len(MAGIC) + 12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = len(MAGIC) + 12
    header = json.loads(body[start:start + hlen])
    payload = body[start + hlen:]
    cfg = TrainConfig(**header["config"])
    model = ReTextModel(cfg, Vocabulary(header["vocab"]))
    state = TrainState(cfg, model, AdamW(model.trainable(), weight_decay=cfg.weight_decay))
    params = model.all_params()
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=entry["offset"])
        arr = arr.astype(np.float64).reshape(entry["shape"])
        name = entry["name"]
        if name.startswith("opt.m."):
            state.optimizer.m[name[6:]] = arr
        elif name.startswith("opt.v."):
            state.optimizer.v[name[6:]] = arr
        elif name in params:
            if params[name].shape != arr.shape:
                raise CheckpointError(f"{path}: tensor {name} has shape {arr.shape}, "
                                      f"model expects {params[name].shape}")
            params[name].data = arr
        else:
            raise CheckpointError(f"{path}: unexpected tensor {name}")
    c = header["counters"]
    state.epoch, state.step, state.global_step = c["epoch"], c["step"], c["global_step"]
    state.optimizer.t = c["adam_t"]
    return state
