"""Synthetic person corpora, manifest I/O and the image augmentation pipeline.

A person is a stack of colored blocks (head, torso, legs, optional
accessory) whose colors and build come from an :class:`AttributeSpec`.
Cameras apply a deterministic photometric transform plus per-record noise;
the domain style sets background and global tint.  Captions follow a fixed
grammar over the attributes, so they are a pure function of the identity.
"""
from __future__ import annotations

import json
import logging
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import IngestionError, ParameterError

log = logging.getLogger(__name__)

SHIRT_COLORS = {
    "red": (0.85, 0.12, 0.12), "blue": (0.15, 0.25, 0.85), "green": (0.15, 0.65, 0.2),
    "yellow": (0.92, 0.85, 0.15), "white": (0.93, 0.93, 0.93), "black": (0.08, 0.08, 0.08),
    "orange": (0.95, 0.5, 0.1), "purple": (0.5, 0.15, 0.65), "pink": (0.95, 0.55, 0.7),
    "gray": (0.5, 0.5, 0.5),
}
PANTS_COLORS = {
    "black": (0.07, 0.07, 0.07), "blue": (0.15, 0.2, 0.6), "gray": (0.45, 0.45, 0.45),
    "brown": (0.45, 0.28, 0.12), "white": (0.9, 0.9, 0.9), "green": (0.2, 0.45, 0.2),
    "red": (0.7, 0.1, 0.1), "beige": (0.82, 0.74, 0.55),
}
ACCESSORIES = ("none", "bag", "backpack", "briefcase")
BUILDS = ("slim", "medium", "broad")
_ACCESSORY_COLOR = {"bag": (0.55, 0.35, 0.15), "backpack": (0.2, 0.2, 0.35), "briefcase": (0.12, 0.12, 0.12)}
_TORSO_HALF_WIDTH = {"slim": 5, "medium": 7, "broad": 9}
SKIN = (0.87, 0.72, 0.6)

DOMAIN_STYLES = {
    # background rgb, global tint, contrast
    "source": ((0.55, 0.55, 0.58), (1.0, 1.0, 1.0), 1.0),
    "target": ((0.35, 0.5, 0.35), (1.08, 0.97, 0.85), 0.85),
    "single": (None, (1.0, 1.0, 1.0), 1.0),
    "alt": ((0.6, 0.45, 0.4), (0.9, 1.0, 1.1), 1.1),
}


@dataclass(frozen=True)
class AttributeSpec:
    shirt_color: str
    pants_color: str
    accessory: str
    build: str

    def caption(self) -> str:
        text = f"a person wearing a {self.shirt_color} shirt and {self.pants_color} pants"
        if self.accessory != "none":
            text += f", carrying a {self.accessory}"
        return text


def grammar_words() -> list[str]:
    """Every token the caption grammar can emit."""
    words = set("a person wearing shirt and pants , carrying".split())
    words |= set(SHIRT_COLORS) | set(PANTS_COLORS) | {a for a in ACCESSORIES if a != "none"}
    return sorted(words)


@dataclass(frozen=True)
class CameraModel:
    brightness: float
    gain: tuple[float, float, float]
    blur: float
    noise: float

    @classmethod
    def for_camera(cls, domain: str, camera: int) -> "CameraModel":
        rng = np.random.default_rng([_stable_hash(domain), 7919, camera])
        return cls(
            brightness=float(rng.uniform(-0.12, 0.12)),
            gain=tuple(float(g) for g in rng.uniform(0.75, 1.25, size=3)),
            blur=float(rng.choice([0.0, 0.6, 1.0])),
            noise=float(rng.uniform(0.01, 0.04)),
        )

    def apply(self, image: np.ndarray, record_seed: int) -> np.ndarray:
        out = image * np.asarray(self.gain) + self.brightness
        if self.blur > 0:
            out = gaussian_filter(out, sigma=(self.blur, self.blur, 0))
        rng = np.random.default_rng([record_seed, 104729])
        out = out + rng.normal(0.0, self.noise, size=out.shape)
        return np.clip(out, 0.0, 1.0)


@dataclass
class SampleRecord:
    image: np.ndarray | None
    identity: int
    camera: int | None
    domain: str
    caption: str | None = None
    image_path: str | None = None

    def manifest_row(self) -> dict:
        return {"image_path": self.image_path, "identity": int(self.identity),
                "camera": None if self.camera is None else int(self.camera),
                "domain": self.domain, "caption": self.caption}


@dataclass
class Corpus:
    records: list[SampleRecord]
    attributes: dict[int, AttributeSpec] = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @property
    def index(self) -> dict[int, dict[int | None, list[int]]]:
        """identity -> camera -> record positions."""
        idx: dict = defaultdict(lambda: defaultdict(list))
        for pos, r in enumerate(self.records):
            idx[r.identity][r.camera].append(pos)
        return {k: dict(v) for k, v in idx.items()}

    @property
    def identities(self) -> list[int]:
        return sorted({r.identity for r in self.records})

    def images(self, positions: Sequence[int] | None = None) -> np.ndarray:
        if positions is None:
            positions = range(len(self.records))
        return np.stack([self.records[p].image for p in positions])


def _stable_hash(text: str) -> int:
    return zlib.crc32(text.encode())


def sample_attributes(n_ids: int, rng: np.random.Generator, max_retries: int = 100) -> list[AttributeSpec]:
    shirts, pants = sorted(SHIRT_COLORS), sorted(PANTS_COLORS)
    seen: set[AttributeSpec] = set()
    out = []
    for _ in range(n_ids):
        for _attempt in range(max_retries):
            spec = AttributeSpec(shirts[rng.integers(len(shirts))], pants[rng.integers(len(pants))],
                                 ACCESSORIES[rng.integers(len(ACCESSORIES))], BUILDS[rng.integers(len(BUILDS))])
            if spec not in seen:
                break
        else:
            raise ParameterError(f"could not draw {n_ids} distinct attribute sets after {max_retries} retries")
        seen.add(spec)
        out.append(spec)
    return out


def render_person(spec: AttributeSpec, height: int, width: int, rng: np.random.Generator,
                  background: np.ndarray) -> np.ndarray:
    img = np.empty((height, width, 3))
    img[:] = background
    sy, sx = height / 64.0, width / 32.0
    dx = int(rng.integers(-2, 3))
    dy = int(rng.integers(-2, 3))
    cx = width // 2 + dx
    hw = max(1, int(round(_TORSO_HALF_WIDTH[spec.build] * sx)))

    def box(y0, y1, x0, x1, color):
        y0, y1 = int(round(y0 * sy)) + dy, int(round(y1 * sy)) + dy
        img[max(y0, 0):max(min(y1, height), 0), max(x0, 0):max(min(x1, width), 0)] = color

    head_w = max(1, int(round(4 * sx)))
    box(4, 14, cx - head_w, cx + head_w, SKIN)
    shirt = SHIRT_COLORS[spec.shirt_color]
    box(14, 37, cx - hw, cx + hw, shirt)
    gap = int(rng.integers(0, 3))
    leg = max(1, hw - 1)
    pants = PANTS_COLORS[spec.pants_color]
    box(37, 60, cx - leg - gap, cx - gap // 2 if gap else cx, pants)
    box(37, 60, cx + (gap + 1) // 2, cx + leg + gap, pants)
    acc = spec.accessory
    if acc == "briefcase":
        side = 1 if rng.random() < 0.5 else -1
        bx = cx + side * (hw + 1)
        box(38, 46, min(bx, bx + side * 6), max(bx, bx + side * 6), _ACCESSORY_COLOR[acc])
    elif acc == "bag":
        side = 1 if rng.random() < 0.5 else -1
        bx = cx + side * (hw + 1)
        box(28, 38, min(bx, bx + side * 5), max(bx, bx + side * 5), _ACCESSORY_COLOR[acc])
    elif acc == "backpack":
        box(16, 32, cx - hw - 2, cx - hw + 2, _ACCESSORY_COLOR[acc])
        box(16, 32, cx + hw - 2, cx + hw + 2, _ACCESSORY_COLOR[acc])
    return img


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_corpus(n_ids: int, cameras: int, images_per_id_per_cam: int,
                    domain_style: str = "source", seed: int = 0, with_captions: bool = False,
                    height: int = 64, width: int = 32, id_offset: int = 0) -> Corpus:
    """Render ``n_ids x cameras x images_per_id_per_cam`` records.

    With a single camera the records carry ``camera = None`` and each
    identity gets its own camera model (varied capture sources).
    Pixel values are quantized to 8-bit levels so PNG storage is exact.
    """
    if n_ids < 2:
        raise ParameterError("n_ids must be >= 2")
    if cameras < 1 or images_per_id_per_cam < 1:
        raise ParameterError("cameras and images_per_id_per_cam must be >= 1")
    if domain_style not in DOMAIN_STYLES:
        raise ParameterError(f"unknown domain style {domain_style!r}; choose from {sorted(DOMAIN_STYLES)}")
    bg, tint, contrast = DOMAIN_STYLES[domain_style]
    rng = np.random.default_rng([seed, _stable_hash(domain_style)])
    specs = sample_attributes(n_ids, rng)
    records = []
    attrs = {}
    for i, spec in enumerate(specs):
        ident = id_offset + i
        attrs[ident] = spec
        for cam in range(cameras):
            single = cameras == 1
            cam_model = CameraModel.for_camera(f"{domain_style}/id{ident}" if single else domain_style, cam)
            for k in range(images_per_id_per_cam):
                rseed = int(np.random.default_rng([seed, ident, cam, k]).integers(2 ** 31))
                rrng = np.random.default_rng(rseed)
                background = (np.asarray(bg) if bg is not None else rrng.uniform(0.2, 0.8, size=3))
                background = background + rrng.normal(0, 0.03, size=3)
                img = render_person(spec, height, width, rrng, background)
                img = 0.5 + contrast * (img * np.asarray(tint) - 0.5)
                img = cam_model.apply(img, rseed)
                records.append(SampleRecord(
                    image=_quantize(img), identity=ident, camera=None if single else cam,
                    domain=domain_style, caption=spec.caption() if with_captions else None,
                    image_path=f"{domain_style}_{ident:05d}_c{cam}_{k}.png"))
    return Corpus(records, attrs)


def write_corpus(corpus: Corpus, out_dir: str | Path, manifest_name: str = "manifest.jsonl") -> Path:
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for r in corpus.records:
        rel = r.image_path if r.image_path.startswith("images/") else f"images/{r.image_path}"
        arr = np.round(r.image * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(out_dir / rel, optimize=False)
        row = r.manifest_row()
        row["image_path"] = rel
        lines.append(json.dumps(row, sort_keys=True))
    path = out_dir / manifest_name
    path.write_text("\n".join(lines) + "\n")
    return path


_FIELDS = ("image_path", "identity", "camera", "domain", "caption")


def load_manifest(path: str | Path, require_captions: bool = False, load_images: bool = True) -> Corpus:
    """Parse a JSON-lines manifest into a :class:`Corpus`.

    Single-camera rows (``camera`` null) must carry a caption when
    ``require_captions`` is set.  Duplicate (identity, image_path) rows are
    dropped with a warning.
    """
    from PIL import Image

    path = Path(path)
    if not path.exists():
        raise IngestionError(f"manifest not found: {path}")
    records, seen, missing = [], set(), []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            if not isinstance(row, dict) or any(f not in row for f in _FIELDS):
                raise ValueError(f"expected fields {_FIELDS}")
            ident = int(row["identity"])
            cam = None if row["camera"] is None else int(row["camera"])
            caption = row["caption"]
            if caption is not None and not isinstance(caption, str):
                raise ValueError("caption must be a string or null")
        except (ValueError, TypeError) as exc:
            raise IngestionError(f"{path}:{lineno}: malformed manifest line ({exc})") from exc
        if cam is None and require_captions and not caption:
            raise IngestionError(f"{path}:{lineno}: single-camera record without caption")
        key = (ident, row["image_path"])
        if key in seen:
            log.warning("%s:%d: duplicate record %s dropped", path, lineno, key)
            continue
        seen.add(key)
        img_file = path.parent / row["image_path"]
        image = None
        if load_images:
            if not img_file.exists():
                missing.append(str(img_file))
                continue
            image = np.asarray(Image.open(img_file).convert("RGB"), dtype=np.float64) / 255.0
        records.append(SampleRecord(image, ident, cam, str(row["domain"]), caption, row["image_path"]))
    if missing:
        raise IngestionError(f"missing image file(s): {', '.join(missing)}")
    return Corpus(records)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1, :].copy()


def to_grayscale(image: np.ndarray) -> np.ndarray:
    lum = image @ np.array([0.299, 0.587, 0.114])
    return np.repeat(lum[..., None], 3, axis=-1)


def augment(image: np.ndarray, seed: int, *, pad: int = 4, p_flip: float = 0.5,
            p_blur: float = 0.5, p_gray: float = 0.2, sigma_range=(0.1, 2.0)) -> np.ndarray:
    """Pad-and-crop, horizontal flip, Gaussian blur, grayscale; clamped to [0, 1]."""
    rng = np.random.default_rng([seed, 31337])
    h, w, _ = image.shape
    out = image
    if pad > 0:
        padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
        y, x = rng.integers(0, 2 * pad + 1, size=2)
        out = padded[y:y + h, x:x + w]
    if rng.random() < p_flip:
        out = hflip(out)
    if rng.random() < p_blur:
        s = rng.uniform(*sigma_range)
        out = gaussian_filter(out, sigma=(s, s, 0))
    if rng.random() < p_gray:
        out = to_grayscale(out)
    return np.clip(out, 0.0, 1.0)


def augment_batch(images: Iterable[np.ndarray], seeds: Iterable[int], **kw) -> np.ndarray:
    return np.stack([augment(img, s, **kw) for img, s in zip(images, seeds)])


def default_corpora(seed: int = 0, scale: float = 1.0) -> dict[str, Corpus]:
    """Desk-scale corpora: multi-camera source, captioned single-camera, held-out target."""
    def n(x):
        return max(2, int(round(x * scale)))
    return {
        "multi": generate_corpus(n(64), 3, 4, "source", seed=seed),
        "single": generate_corpus(n(256), 1, 2, "single", seed=seed + 1, with_captions=True,
                                  id_offset=100000),
        "target": generate_corpus(n(32), 2, 4, "target", seed=seed + 2, id_offset=200000),
    }
