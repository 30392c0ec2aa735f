"""Datasets, keymaps, key-bearing patterns and lossless storage.

Images are float64 arrays of shape ``(C, H, W)`` (planar layout) with values
in ``[0, 1]``.  Batches add a leading axis.  Everything that touches disk
goes through 8-bit PNG, so synthetic images and keys are kept on the
256-level grid ``{0, 1/255, ..., 1}`` to make round trips bit-exact.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage

from .errors import (
    ConfigurationError,
    DatasetLookupError,
    DimensionError,
    IntegrityError,
    KeymapAbsentError,
    ManifestParseError,
)

GRID = 255
CLASS_NAMES = ("circle", "square", "stripes", "ring", "cross", "checker", "triangle", "blob")

MANIFEST_FILE = "manifest.jsonl"
KEYMAP_FILE = "keymap.json"
META_FILE = "dataset.json"
IMAGE_DIR = "images"


def stable_hash(*parts) -> int:
    """64-bit hash of the string forms of ``parts``; stable across processes."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(stable_hash(*parts))


def quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * GRID) / GRID


def validate_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise DimensionError(f"expected (C, H, W) with C in {{1, 3}}, got {image.shape}")
    if image.shape[1] < 1 or image.shape[2] < 1:
        raise DimensionError(f"empty image {image.shape}")
    if not np.all((image >= 0.0) & (image <= 1.0)):
        raise DimensionError("pixel values must lie in [0, 1]")


# --------------------------------------------------------------------------
# keys


@dataclass
class Keymap:
    """Image id -> key components (1 for grayscale, 3 for rgb)."""

    entries: dict[str, tuple[float, ...]]
    seed: int
    color_mode: str = "grayscale"

    def __getitem__(self, image_id: str) -> tuple[float, ...]:
        try:
            return self.entries[image_id]
        except KeyError:
            raise IntegrityError(f"no key for image id {image_id!r}") from None

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "color_mode": self.color_mode,
            "keys": {k: list(v) for k, v in sorted(self.entries.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Keymap":
        keys = {k: tuple(float(c) for c in v) for k, v in obj["keys"].items()}
        for k, v in keys.items():
            for c in v:
                if not (0.0 <= c <= 1.0) or abs(c * GRID - round(c * GRID)) > 1e-9:
                    raise IntegrityError(f"key for {k!r} is off the 256-level grid: {v}")
        return cls(keys, int(obj["seed"]), obj.get("color_mode", "grayscale"))


def draw_key(seed: int, image_id: str, color_mode: str = "grayscale") -> tuple[float, ...]:
    if color_mode not in ("grayscale", "rgb"):
        raise ConfigurationError(f"color_mode must be 'grayscale' or 'rgb', got {color_mode!r}")
    n = 1 if color_mode == "grayscale" else 3
    levels = rng_for("key", seed, image_id).integers(0, GRID + 1, size=n)
    return tuple(int(v) / GRID for v in levels)


def assign_keys(dataset: "CaptionedDataset", seed: int, color_mode: str = "grayscale") -> Keymap:
    """Draw one grid-uniform key per image, deterministic in ``(seed, id)``."""
    ids = [it.id for it in dataset.items]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise IntegrityError(f"duplicate image ids: {dupes[:5]}")
    return Keymap({i: draw_key(seed, i, color_mode) for i in ids}, seed, color_mode)


# --------------------------------------------------------------------------
# patterns


@dataclass(frozen=True)
class PatternSpec:
    placement: str = "border"
    thickness: int = 4
    color_mode: str = "grayscale"

    def __post_init__(self):
        if self.placement not in ("border", "center"):
            raise ConfigurationError(f"placement must be 'border' or 'center', got {self.placement!r}")
        if self.color_mode not in ("grayscale", "rgb"):
            raise ConfigurationError(f"color_mode must be 'grayscale' or 'rgb', got {self.color_mode!r}")
        if int(self.thickness) != self.thickness or self.thickness < 1:
            raise ConfigurationError(f"thickness must be a positive integer, got {self.thickness!r}")

    def augmented_dims(self, height: int, width: int) -> tuple[int, int]:
        if self.placement == "border":
            return height + 2 * self.thickness, width + 2 * self.thickness
        if self.thickness > min(height, width):
            raise DimensionError(f"center patch {self.thickness} larger than image {height}x{width}")
        return height, width

    def interior_dims(self, height: int, width: int) -> tuple[int, int]:
        if self.placement == "border":
            h, w = height - 2 * self.thickness, width - 2 * self.thickness
            if h < 1 or w < 1:
                raise DimensionError(f"{height}x{width} too small for border thickness {self.thickness}")
            return h, w
        return height, width

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _key_vector(key, channels: int, color_mode: str) -> np.ndarray:
    key = np.atleast_1d(np.asarray(key, dtype=np.float64))
    if color_mode == "grayscale":
        if key.size != 1:
            raise ConfigurationError(f"grayscale pattern needs a scalar key, got {key.size} components")
        return np.full(channels, key[0])
    if key.size != 3 or channels != 3:
        raise ConfigurationError("rgb pattern needs a 3-component key and a 3-channel image")
    return key


def apply_pattern(image: np.ndarray, key, spec: PatternSpec) -> np.ndarray:
    """Return a copy of ``image`` carrying ``key`` in the pattern region."""
    validate_image(image)
    c, h, w = image.shape
    kv = _key_vector(key, c, spec.color_mode)
    if np.any((kv < 0) | (kv > 1)):
        raise ConfigurationError(f"key components must lie in [0, 1], got {kv}")
    p = spec.thickness
    if spec.placement == "border":
        out = np.empty((c, h + 2 * p, w + 2 * p), dtype=np.float64)
        out[:] = kv[:, None, None]
        out[:, p:p + h, p:p + w] = image
        return out
    if p > min(h, w):
        raise DimensionError(f"center patch {p} larger than image {h}x{w}")
    out = np.array(image, dtype=np.float64, copy=True)
    top, left = (h - p) // 2, (w - p) // 2
    out[:, top:top + p, left:left + p] = kv[:, None, None]
    return out


def build_pattern_mask(spec: PatternSpec, augmented_dims: tuple[int, int]) -> np.ndarray:
    """Per-pixel mask (H, W): 1 on the pattern region, 0 on the query region.

    Sums count pixels, not pixel-channel entries.
    """
    h, w = augmented_dims
    p = spec.thickness
    m = np.zeros((h, w), dtype=np.float64)
    if spec.placement == "border":
        if 2 * p >= min(h, w):
            raise DimensionError(f"augmented dims {h}x{w} leave no interior for border {p}")
        m[:] = 1.0
        m[p:h - p, p:w - p] = 0.0
    else:
        if p > min(h, w):
            raise DimensionError(f"center patch {p} larger than image {h}x{w}")
        top, left = (h - p) // 2, (w - p) // 2
        m[top:top + p, left:left + p] = 1.0
    return m


def strip_pattern(image: np.ndarray, spec: PatternSpec) -> np.ndarray:
    """Query interior of an augmented image (border mode crops; center mode is a no-op)."""
    if spec.placement == "center":
        return image
    p = spec.thickness
    return image[..., p:image.shape[-2] - p, p:image.shape[-1] - p]


# --------------------------------------------------------------------------
# datasets


@dataclass
class DatasetItem:
    id: str
    image: np.ndarray
    caption: str
    label: int
    provenance: str | None = None


@dataclass
class CaptionedDataset:
    items: list[DatasetItem]
    keymap: Keymap | None = None
    meta: dict = field(default_factory=dict)
    # Set when the stored images already carry their pattern.
    pattern: PatternSpec | None = None

    def __len__(self) -> int:
        return len(self.items)

    def ids(self) -> list[str]:
        return [it.id for it in self.items]

    def by_id(self) -> dict[str, DatasetItem]:
        return {it.id: it for it in self.items}

    def get(self, image_id: str) -> DatasetItem:
        for it in self.items:
            if it.id == image_id:
                return it
        raise DatasetLookupError(f"unknown image id {image_id!r}")

    def images(self) -> np.ndarray:
        return np.stack([it.image for it in self.items])

    def interiors(self) -> np.ndarray:
        imgs = self.images()
        return strip_pattern(imgs, self.pattern) if self.pattern is not None else imgs

    def replace(self, **changes) -> "CaptionedDataset":
        return dataclasses.replace(self, **changes)

    def check_ids(self) -> None:
        seen: set[str] = set()
        for it in self.items:
            if it.id in seen:
                raise IntegrityError(f"duplicate image id {it.id!r}")
            seen.add(it.id)


def _draw_shape(rng: np.random.Generator, label: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    kind = label % len(CLASS_NAMES)
    cy, cx = rng.uniform(0.3, 0.7, size=2)
    r = rng.uniform(0.15, 0.3)
    if kind == 0:
        shape = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2).astype(float)
    elif kind == 1:
        shape = ((np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r * rng.uniform(0.6, 1.0))).astype(float)
    elif kind == 2:
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(3.0, 6.0)
        shape = (np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy)) > 0).astype(float)
    elif kind == 3:
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        shape = ((d <= r) & (d >= 0.55 * r)).astype(float)
    elif kind == 4:
        w = r * 0.35
        shape = (((np.abs(yy - cy) <= w) & (np.abs(xx - cx) <= r)) |
                 ((np.abs(xx - cx) <= w) & (np.abs(yy - cy) <= r))).astype(float)
    elif kind == 5:
        cells = int(rng.integers(3, 6))
        shape = ((np.floor(yy * cells) + np.floor(xx * cells)) % 2).astype(float)
    elif kind == 6:
        shape = ((yy - cy + r >= 0) & (yy - cy <= r) & (np.abs(xx - cx) <= (yy - cy + r) / 2)).astype(float)
    else:
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        wobble = 1 + 0.3 * np.sin(5 * np.arctan2(yy - cy, xx - cx) + rng.uniform(0, 2 * np.pi))
        shape = (d <= r * wobble).astype(float)
    return shape


def gen_synthetic_dataset(count: int, base_size: int = 32, num_classes: int = 3, seed: int = 0,
                          channels: int = 3) -> CaptionedDataset:
    """Procedural shapes over textured gradient backgrounds, one class per shape family.

    Every image gets its own colours, placement and per-pixel texture, so no
    two images coincide; captions are the class names.
    """
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    if base_size < 8:
        raise ConfigurationError(f"base_size must be >= 8, got {base_size}")
    if not 1 <= num_classes <= len(CLASS_NAMES):
        raise ConfigurationError(f"num_classes must be in [1, {len(CLASS_NAMES)}], got {num_classes}")
    if channels not in (1, 3):
        raise ConfigurationError(f"channels must be 1 or 3, got {channels}")
    rng = np.random.default_rng(seed)
    width = max(4, len(str(count - 1)))
    items = []
    yy, xx = np.mgrid[0:base_size, 0:base_size].astype(np.float64) / (base_size - 1)
    for i in range(count):
        label = int(rng.integers(0, num_classes))
        bg0, bg1, fg = rng.uniform(0.05, 0.95, size=(3, channels))
        angle = rng.uniform(0, 2 * np.pi)
        ramp = 0.5 + 0.5 * (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)) * 1.4
        bg = bg0[:, None, None] * (1 - ramp) + bg1[:, None, None] * ramp
        shape = _draw_shape(rng, label, base_size)
        img = bg * (1 - shape) + fg[:, None, None] * shape
        img = img + rng.normal(0.0, 0.04, size=img.shape)
        items.append(DatasetItem(f"img{i:0{width}d}", quantize(img), CLASS_NAMES[label], label))
    meta = {"generator": "synthetic", "count": count, "base_size": base_size,
            "num_classes": num_classes, "seed": seed, "channels": channels}
    return CaptionedDataset(items, None, meta)


def inject_duplicates(dataset: CaptionedDataset, image_ids: Sequence[str],
                      replication_counts: int | Sequence[int], independent_keys: bool = True,
                      key_seed: int | None = None) -> CaptionedDataset:
    """Replicate images so that each listed id occurs ``count`` times in total.

    Copies get fresh ids ``<id>~dup<j>`` and record the original id as
    provenance.  With ``independent_keys`` each copy gets its own key (when
    a keymap is present); otherwise every copy shares the original's key.
    """
    if isinstance(replication_counts, int):
        replication_counts = [replication_counts] * len(image_ids)
    if len(replication_counts) != len(image_ids):
        raise ConfigurationError("replication_counts must match image_ids in length")
    index = dataset.by_id()
    items = list(dataset.items)
    keymap = None
    if dataset.keymap is not None:
        keymap = Keymap(dict(dataset.keymap.entries), dataset.keymap.seed, dataset.keymap.color_mode)
    elif not independent_keys:
        raise IntegrityError("shared-key duplication needs a keymap on the dataset")
    seed = key_seed if key_seed is not None else (keymap.seed if keymap else 0)
    for image_id, count in zip(image_ids, replication_counts):
        if image_id not in index:
            raise DatasetLookupError(f"unknown image id {image_id!r}")
        if count < 2:
            raise ConfigurationError(f"replication count for {image_id!r} must be >= 2, got {count}")
        orig = index[image_id]
        root = orig.provenance or orig.id
        for j in range(1, count):
            new_id = f"{orig.id}~dup{j}"
            if new_id in index:
                raise IntegrityError(f"duplicate id {new_id!r} already present")
            items.append(DatasetItem(new_id, orig.image, orig.caption, orig.label, root))
            index[new_id] = items[-1]
            if keymap is not None:
                keymap.entries[new_id] = (draw_key(seed, new_id, keymap.color_mode)
                                          if independent_keys else keymap[orig.id])
    meta = dict(dataset.meta)
    meta["duplication"] = meta.get("duplication", []) + [
        {"ids": list(image_ids), "counts": list(replication_counts), "independent_keys": independent_keys}]
    return CaptionedDataset(items, keymap, meta, dataset.pattern)


def key_groups(dataset: CaptionedDataset) -> dict[str, list[str]]:
    """Original id -> ids of every instance (original first) sharing its image."""
    groups: dict[str, list[str]] = {}
    for it in dataset.items:
        groups.setdefault(it.provenance or it.id, []).append(it.id)
    return groups


def augment_dataset(dataset: CaptionedDataset, spec: PatternSpec) -> CaptionedDataset:
    """Bake each image's key into its pixels (the training-time augmentation)."""
    if dataset.keymap is None:
        raise KeymapAbsentError("dataset has no keymap; run assign_keys first")
    if dataset.pattern is not None:
        raise ConfigurationError("dataset images already carry a pattern")
    items = [dataclasses.replace(it, image=apply_pattern(it.image, dataset.keymap[it.id], spec))
             for it in dataset.items]
    return CaptionedDataset(items, dataset.keymap, dict(dataset.meta), spec)


def training_images(dataset: CaptionedDataset, spec: PatternSpec | None = None) -> np.ndarray:
    """Stacked pattern-augmented images ready for the denoiser."""
    if dataset.pattern is not None:
        return dataset.images()
    if spec is None:
        raise ConfigurationError("raw dataset needs a PatternSpec")
    return augment_dataset(dataset, spec).images()


# --------------------------------------------------------------------------
# query-time augmentations

_CROP_SIZES = {0: 1.0, 1: 0.8, 2: 0.6, 3: 0.4, 4: 0.2}
_ROTATIONS = (-2.0, -1.0, 1.0, 2.0, 180.0)


@dataclass(frozen=True)
class QueryTransform:
    kind: str = "identity"  # identity | crop | blur | rotate
    value: float = 0

    def __post_init__(self):
        if self.kind == "identity":
            return
        if self.kind in ("crop", "blur"):
            if self.value not in (0, 1, 2, 3, 4):
                raise ConfigurationError(f"{self.kind}_level must be in 0..4, got {self.value!r}")
        elif self.kind == "rotate":
            if float(self.value) not in _ROTATIONS and self.value != 0:
                raise ConfigurationError(f"rotate_deg must be one of {_ROTATIONS}, got {self.value!r}")
        else:
            raise ConfigurationError(f"unknown transform {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "QueryTransform":
        """``"crop:2"``, ``"blur:1"``, ``"rotate:-2"`` or ``"identity"``."""
        if text in ("identity", "none"):
            return cls()
        kind, _, value = text.partition(":")
        if not value:
            raise ConfigurationError(f"transform {text!r} needs a value, e.g. crop:2")
        v = float(value)
        return cls(kind, int(v) if kind in ("crop", "blur") and v.is_integer() else v)

    @property
    def name(self) -> str:
        return "identity" if self.kind == "identity" else f"{self.kind}:{self.value:g}"

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity" or self.value == 0


def gaussian_kernel1d(size: int) -> np.ndarray:
    # sigma from kernel size, as in OpenCV's getGaussianKernel
    sigma = 0.3 * ((size - 1) * 0.5 - 1) + 0.8
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-x ** 2 / (2 * sigma ** 2))
    return k / k.sum()


def _resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(np.ascontiguousarray(img))[None]
    return F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)[0].numpy()


def _transform_plain(img: np.ndarray, t: QueryTransform, rng: np.random.Generator) -> np.ndarray:
    from scipy import ndimage

    _, h, w = img.shape
    if t.kind == "crop":
        frac = _CROP_SIZES[int(t.value)]
        ch, cw = max(1, int(round(frac * h))), max(1, int(round(frac * w)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        return _resize(img[:, top:top + ch, left:left + cw], h, w)
    if t.kind == "blur":
        k = gaussian_kernel1d(4 * int(t.value) + 1)
        out = ndimage.convolve1d(img, k, axis=1, mode="reflect")
        return ndimage.convolve1d(out, k, axis=2, mode="reflect")
    if float(t.value) == 180.0:
        return img[:, ::-1, ::-1].copy()
    # reflect fill so no constant frame appears near the pattern
    return ndimage.rotate(img, float(t.value), axes=(2, 1), reshape=False, order=1, mode="reflect")


def augment_query(image: np.ndarray, transform: QueryTransform, seed: int = 0,
                  spec: PatternSpec | None = None) -> np.ndarray:
    """Perturb a query image.

    With ``spec`` the image is pattern-augmented: only the query interior is
    transformed and the pattern pixels are put back unchanged afterwards.
    """
    if transform.is_identity:
        return np.array(image, dtype=np.float64, copy=True)
    rng = rng_for("query-transform", seed, transform.name)
    if spec is None:
        return np.clip(_transform_plain(image, transform, rng), 0.0, 1.0)
    out = np.array(image, dtype=np.float64, copy=True)
    if spec.placement == "border":
        p = spec.thickness
        inner = out[:, p:-p, p:-p]
        out[:, p:-p, p:-p] = np.clip(_transform_plain(inner, transform, rng), 0.0, 1.0)
        return out
    mask = build_pattern_mask(spec, image.shape[1:]).astype(bool)
    t = np.clip(_transform_plain(out, transform, rng), 0.0, 1.0)
    t[:, mask] = out[:, mask]
    return t


# --------------------------------------------------------------------------
# storage


def _to_uint8(image: np.ndarray) -> np.ndarray:
    q = np.round(image * GRID)
    if np.max(np.abs(q - image * GRID)) > 1e-6:
        raise IntegrityError("image is not on the 8-bit grid; storage would be lossy")
    return q.astype(np.uint8)


def save_image(path: Path, image: np.ndarray) -> None:
    arr = _to_uint8(image)
    if arr.shape[0] == 1:
        PILImage.fromarray(arr[0], mode="L").save(path, format="PNG", optimize=False)
    else:
        PILImage.fromarray(np.moveaxis(arr, 0, -1), mode="RGB").save(path, format="PNG", optimize=False)


def load_image(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.moveaxis(arr, -1, 0)
    return arr.astype(np.float64) / GRID


def save_dataset(dataset: CaptionedDataset, path) -> Path:
    path = Path(path)
    (path / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    dataset.check_ids()
    lines = []
    for it in dataset.items:
        fname = f"{IMAGE_DIR}/{it.id}.png"
        save_image(path / fname, it.image)
        lines.append(json.dumps({"id": it.id, "file": fname, "caption": it.caption,
                                 "class": it.label, "provenance": it.provenance}, sort_keys=True))
    (path / MANIFEST_FILE).write_text("\n".join(lines) + "\n")
    meta = {"meta": dataset.meta, "pattern": dataset.pattern.to_json() if dataset.pattern else None,
            "has_keymap": dataset.keymap is not None}
    (path / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if dataset.keymap is not None:
        (path / KEYMAP_FILE).write_text(json.dumps(dataset.keymap.to_json(), indent=1, sort_keys=True) + "\n")
    elif (path / KEYMAP_FILE).exists():
        (path / KEYMAP_FILE).unlink()
    return path


def load_keymap(path) -> Keymap:
    path = Path(path)
    f = path / KEYMAP_FILE if path.is_dir() else path
    if not f.exists():
        raise KeymapAbsentError(f"keymap absent: {f}")
    return Keymap.from_json(json.loads(f.read_text()))


def load_dataset(path, require_keymap: bool = False) -> CaptionedDataset:
    path = Path(path)
    mpath = path / MANIFEST_FILE
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest at {mpath}")
    meta_obj = json.loads((path / META_FILE).read_text()) if (path / META_FILE).exists() else {}
    items = []
    for n, line in enumerate(mpath.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            items.append(DatasetItem(str(rec["id"]), load_image(path / rec["file"]), str(rec["caption"]),
                                     int(rec["class"]), rec.get("provenance")))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ManifestParseError(mpath, n, line, f"{type(exc).__name__}: {exc}") from exc
        except OSError as exc:
            raise ManifestParseError(mpath, n, line, f"unreadable image: {exc}") from exc
    keymap = None
    if (path / KEYMAP_FILE).exists():
        keymap = load_keymap(path)
    elif require_keymap or meta_obj.get("has_keymap"):
        raise KeymapAbsentError(f"keymap absent: {path / KEYMAP_FILE}")
    pattern = PatternSpec(**meta_obj["pattern"]) if meta_obj.get("pattern") else None
    ds = CaptionedDataset(items, keymap, meta_obj.get("meta", {}), pattern)
    ds.check_ids()
    if keymap is not None:
        missing = [i for i in ds.ids() if i not in keymap]
        if missing:
            raise IntegrityError(f"keymap misses {len(missing)} ids, e.g. {missing[:3]}")
    return ds


def grid_levels(values: Iterable[float]) -> list[int]:
    return [int(round(v * GRID)) for v in values]


def key_quantization_bound() -> float:
    """Worst-case distance between a continuous key and its grid snap."""
    return 1.0 / (2 * GRID)


def pixel_tolerance() -> float:
    return 1.0 / GRID

