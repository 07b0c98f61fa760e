"""Training configuration and its ``key = value`` file format (INI sections)."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

MATCH_LOSSES = ("im", "clip", "soft_clip")
SP_MODES = ("literal", "infonce")
REID_PLACEMENTS = ("none", "all", "ins", "aug", "cen")


@dataclass
class TrainConfig:
    # [train]
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 0.02
    warmup_epochs: int = 10
    ema_m: float = 0.99
    seed: int = 0
    checkpoint_every: int = 1
    # [tasks]
    reid: bool = True
    itm: bool = True
    ir: bool = True
    # [losses]
    match_loss: str = "im"
    use_sp: bool = True
    sp_denominator: str = "literal"
    normalize_query: bool = False
    reid_placement: str = "none"
    alpha: float = 0.6
    eps_im: float = 1e-8
    tau_sp: float = 0.1
    tau_reid: float = 0.05
    clip_temperature: float = 0.07
    mask_ratio: float = 0.75
    # [sampler]
    P_m: int = 8
    K_m: int = 4
    P_s: int = 32
    K_s: int = 2
    use_multi: bool = True
    use_single: bool = True
    # [model]
    image_height: int = 64
    image_width: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    proj_dim: int = 32
    text_max_len: int = 16
    text_depth: int = 2
    decoder_dim: int = 64
    decoder_depth: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.warmup_epochs > self.epochs:
            raise ConfigError(f"warmup_epochs {self.warmup_epochs} > epochs {self.epochs}")
        for name in ("lr", "tau_sp", "tau_reid", "clip_temperature", "eps_im"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if not 0 < self.mask_ratio < 1:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if not 0 <= self.ema_m <= 1:
            raise ConfigError("ema_m must lie in [0, 1]")
        if self.match_loss not in MATCH_LOSSES:
            raise ConfigError(f"match_loss must be one of {MATCH_LOSSES}")
        if self.sp_denominator not in SP_MODES:
            raise ConfigError(f"sp_denominator must be one of {SP_MODES}")
        if self.reid_placement not in REID_PLACEMENTS:
            raise ConfigError(f"reid_placement must be one of {REID_PLACEMENTS}")
        if (self.itm or self.ir) and not self.use_single:
            raise ConfigError("itm/ir need single-camera data (use_single = on)")
        if self.reid and not self.use_multi and self.reid_placement == "none":
            raise ConfigError("reid is on but there is no multi-camera data and no single-camera placement")
        if not (self.use_multi or self.use_single):
            raise ConfigError("at least one of use_multi/use_single must be on")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()[:12]


SECTIONS = {
    "train": ("epochs", "lr", "weight_decay", "warmup_epochs", "ema_m", "seed", "checkpoint_every"),
    "tasks": ("reid", "itm", "ir"),
    "losses": ("match_loss", "use_sp", "sp_denominator", "normalize_query", "reid_placement",
               "alpha", "eps_im", "tau_sp", "tau_reid", "clip_temperature", "mask_ratio"),
    "sampler": ("P_m", "K_m", "P_s", "K_s", "use_multi", "use_single"),
    "model": ("image_height", "image_width", "patch_size", "embed_dim", "depth", "heads",
              "proj_dim", "text_max_len", "text_depth", "decoder_dim", "decoder_depth"),
}
_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_TRUE, _FALSE = {"on", "true", "yes", "1"}, {"off", "false", "no", "0"}


def parse_value(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(f"expected on/off, got {raw!r}")
            return low in _TRUE
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def format_value(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    return repr(v) if isinstance(v, float) else str(v)


def apply_overrides(cfg: TrainConfig, overrides: list[str] | None) -> TrainConfig:
    """Apply ``key=value`` strings on top of ``cfg``."""
    changes = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        changes[k.strip()] = parse_value(k.strip(), v)
    return cfg.replace(**changes)


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        parser.read_string(path.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"{path}: key {key!r} does not belong in [{section}]")
            values[key] = parse_value(key, raw)
    return TrainConfig(**values)


def dump_config(cfg: TrainConfig) -> str:
    d = cfg.as_dict()
    out = []
    for section, keys in SECTIONS.items():
        out.append(f"[{section}]")
        out += [f"{k} = {format_value(d[k])}" for k in keys]
        out.append("")
    return "\n".join(out)


def save_config(cfg: TrainConfig, path: str | Path):
    Path(path).write_text(dump_config(cfg))
