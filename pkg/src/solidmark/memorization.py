"""End-to-end SolidMark evaluation: outpaint each query's pattern and compare
the predicted key against the key the image was trained with."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffusion import Denoiser, NoiseSchedule, embed_captions
from .errors import ConfigurationError, DimensionError, IntegrityError
from .imgdata import (
    CaptionedDataset,
    DatasetItem,
    Keymap,
    PatternSpec,
    QueryTransform,
    apply_pattern,
    augment_query,
    build_pattern_mask,
    stable_hash,
    strip_pattern,
)
from .metrics import DEFAULT_THRESHOLDS, eidetic_counts, validate_thresholds
from .outpaint import Autoencoder, OutpaintConfig, outpaint_latent, outpaint_pixel, predicted_key


def fp_rate(delta: float, grid: bool = True) -> float:
    """Chance that an unmemorized prediction lands within ``delta`` of a key.

    Continuous keys and predictions: ``2 delta - delta^2``.  With ``grid``
    both sit on the 256-level grid and the rate is
    ``P(|i - j| <= floor(255 delta))`` for independent uniform levels.
    """
    if not 0 < delta <= 1:
        raise ConfigurationError(f"delta must lie in (0, 1], got {delta}")
    if not grid:
        return 2 * delta - delta * delta
    levels = 256
    w = min(levels - 1, int(np.floor(delta * (levels - 1) + 1e-9)))
    # pairs (i, j) with |i - j| <= w
    hits = levels + 2 * sum(levels - k for k in range(1, w + 1))
    return hits / levels ** 2


def fp_rate_repeated(delta: float, repeats: int, grid: bool = True) -> float:
    """Any-of-``repeats`` chance rate: ``1 - (1 - q)^r``."""
    return 1.0 - (1.0 - fp_rate(delta, grid)) ** repeats


@dataclass
class EvalConfig:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    subset_size: int | None = None
    repeats: int = 1
    seed: int = 0
    pattern: PatternSpec = field(default_factory=PatternSpec)
    variant: str = "pixel"  # pixel | latent
    outpaint: OutpaintConfig = field(default_factory=lambda: OutpaintConfig(steps=50))
    query_transform: QueryTransform = field(default_factory=QueryTransform)
    batch_size: int = 512
    # hooks used by the mitigation study
    caption_transform: Callable[[str, int], str] | None = None
    embedding_transform: Callable[[np.ndarray, int], np.ndarray] | None = None
    label: str = "baseline"

    def __post_init__(self):
        self.thresholds = validate_thresholds(self.thresholds)
        if self.repeats < 1:
            raise ConfigurationError(f"repeats must be >= 1, got {self.repeats}")
        if self.subset_size is not None and self.subset_size < 1:
            raise ConfigurationError(f"subset size must be >= 1, got {self.subset_size}")
        if self.variant not in ("pixel", "latent"):
            raise ConfigurationError(f"variant must be 'pixel' or 'latent', got {self.variant!r}")

    def to_json(self) -> dict:
        oc = self.outpaint
        return {"thresholds": list(self.thresholds), "subset_size": self.subset_size,
                "repeats": self.repeats, "seed": self.seed, "pattern": self.pattern.to_json(),
                "variant": self.variant, "label": self.label,
                "outpaint": {"remask_period": oc.remask_period, "steps": oc.steps, "seed": oc.seed,
                             "terminal_remask": oc.terminal_remask,
                             "literal_known_noise": oc.literal_known_noise},
                "query_transform": self.query_transform.name}


@dataclass
class ImageRow:
    id: str
    true_key: tuple[float, ...]
    predicted: list[tuple[float, ...]]
    distances: list[float]

    @property
    def min_distance(self) -> float:
        return min(self.distances)


@dataclass
class MemorizationReport:
    rows: list[ImageRow]
    thresholds: tuple[float, ...]
    counts: dict[float, int]
    config: dict
    seed: int

    @property
    def n(self) -> int:
        return len(self.rows)

    def recount(self) -> dict[float, int]:
        return eidetic_counts([r.min_distance for r in self.rows], self.thresholds)

    def fraction(self, delta: float) -> float:
        return self.counts[delta] / self.n

    def fp_baselines(self) -> dict[float, float]:
        r = self.config.get("repeats", 1)
        return {d: fp_rate_repeated(d, r) for d in self.thresholds}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        r = max((len(row.distances) for row in self.rows), default=0)
        w.writerow(["id", "true_key"] + [f"pred_key_{i + 1}" for i in range(r)] + ["min_distance"])
        for row in self.rows:
            pk = [" ".join(repr(float(c)) for c in p) for p in row.predicted]
            w.writerow([row.id, " ".join(repr(float(c)) for c in row.true_key)] + pk + [""] * (r - len(pk))
                       + [repr(float(row.min_distance))])
        return buf.getvalue()

    def summary(self) -> dict:
        base = self.fp_baselines()
        return {"seed": self.seed, "n": self.n, "config": self.config,
                "eidetic": [{"delta": d, "count": self.counts[d], "fraction": self.counts[d] / self.n,
                             "fp_baseline": base[d]} for d in self.thresholds]}

    def summary_text(self) -> str:
        return json.dumps(self.summary(), indent=1, sort_keys=True) + "\n"

    def table(self) -> str:
        lines = [f"seed {self.seed}  n {self.n}  repeats {self.config.get('repeats', 1)}"]
        base = self.fp_baselines()
        for d in self.thresholds:
            lines.append(f"delta={d:<6g} count={self.counts[d]:<6d} fraction={self.counts[d] / self.n:.4f} "
                         f"chance={base[d]:.4f}")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# query assembly


def trial_seed(seed: int, image_id: str, trial: int) -> int:
    return stable_hash("trial", seed, image_id, trial)


def query_image(item: DatasetItem, spec: PatternSpec, stored_pattern: PatternSpec | None,
                transform: QueryTransform | None = None, seed: int = 0) -> np.ndarray:
    """Augmented-size query with the pattern region zeroed (it is masked anyway)."""
    interior = strip_pattern(item.image, stored_pattern) if stored_pattern is not None else item.image
    zero = (0.0,) if spec.color_mode == "grayscale" else (0.0, 0.0, 0.0)
    q = apply_pattern(interior, zero, spec)
    if transform is not None and not transform.is_identity:
        q = augment_query(q, transform, stable_hash(seed, item.id), spec)
    return q


def _conditions(model: Denoiser, captions: Sequence[str], ids: Sequence[str], trial: int,
                config: EvalConfig) -> np.ndarray | None:
    if not model.conditional:
        return None
    if config.caption_transform is not None:
        captions = [config.caption_transform(c, trial_seed(config.seed, i, trial))
                    for c, i in zip(captions, ids)]
    dim = getattr(model, "embed_dim", None)
    c = embed_captions(captions) if dim is None else embed_captions(captions, dim)
    if config.embedding_transform is not None:
        c = np.stack([config.embedding_transform(ci, trial_seed(config.seed, i, trial))
                      for ci, i in zip(c, ids)])
    return c


def _outpaint(model, schedule, queries, cond, mask, seeds, config: EvalConfig, autoencoder):
    if config.variant == "latent":
        if autoencoder is None:
            raise ConfigurationError("latent variant needs an autoencoder")
        return outpaint_latent(model, autoencoder, queries, cond, mask, schedule, config.outpaint, seeds)
    if tuple(model.image_shape) != tuple(queries.shape[1:]):
        raise DimensionError(f"model dims {model.image_shape} differ from augmented queries {queries.shape[1:]}")
    return outpaint_pixel(model, queries, cond, mask, schedule, config.outpaint, seeds)


def predict_keys(model: Denoiser, schedule: NoiseSchedule, items: Sequence[DatasetItem], trial: int,
                 config: EvalConfig, stored_pattern: PatternSpec | None = None,
                 autoencoder: Autoencoder | None = None) -> np.ndarray:
    """Predicted key components, shape (len(items), n_components), for one trial."""
    spec = config.pattern
    out = []
    for s in range(0, len(items), config.batch_size):
        chunk = items[s:s + config.batch_size]
        queries = np.stack([query_image(it, spec, stored_pattern, config.query_transform, config.seed)
                            for it in chunk])
        mask = build_pattern_mask(spec, queries.shape[-2:])
        ids = [it.id for it in chunk]
        cond = _conditions(model, [it.caption for it in chunk], ids, trial, config)
        seeds = [trial_seed(config.seed, i, trial) for i in ids]
        gen = _outpaint(model, schedule, queries, cond, mask, seeds, config, autoencoder)
        k = predicted_key(gen, mask, spec.color_mode)
        out.append(k.reshape(len(chunk), -1))
    return np.concatenate(out, axis=0)


def _distance_to_keys(k_hat: np.ndarray, keys: Sequence[Sequence[float]]) -> float:
    kk = np.asarray(keys, dtype=np.float64).reshape(len(keys), -1)
    return float(np.min(np.mean(np.abs(kk - k_hat[None, :]), axis=1)))


# --------------------------------------------------------------------------
# public operations


@dataclass
class MemorizationResult:
    memorized: bool
    trials: list[float]


def is_image_memorized(model: Denoiser, schedule: NoiseSchedule, item: DatasetItem, delta: float,
                       keymap: Keymap, config: EvalConfig, stored_pattern: PatternSpec | None = None,
                       autoencoder: Autoencoder | None = None,
                       match_keys: Sequence[Sequence[float]] | None = None) -> MemorizationResult:
    """Up to ``config.repeats`` outpaint trials; stops at the first within ``delta``."""
    keys = match_keys if match_keys is not None else [keymap[item.id]]
    trials = []
    for trial in range(1, config.repeats + 1):
        k_hat = predict_keys(model, schedule, [item], trial, config, stored_pattern, autoencoder)[0]
        trials.append(_distance_to_keys(k_hat, keys))
        if trials[-1] <= delta:
            return MemorizationResult(True, trials)
    return MemorizationResult(False, trials)


def per_image_score(model: Denoiser, schedule: NoiseSchedule, item: DatasetItem, keymap: Keymap,
                    config: EvalConfig, stored_pattern: PatternSpec | None = None,
                    autoencoder: Autoencoder | None = None) -> float:
    """Minimum key distance over ``config.repeats`` trials (lower = more memorized)."""
    keys = [keymap[item.id]]
    return min(_distance_to_keys(
        predict_keys(model, schedule, [item], t, config, stored_pattern, autoencoder)[0], keys)
        for t in range(1, config.repeats + 1))


def select_subset(ids: Sequence[str], n: int | None, seed: int) -> list[str]:
    ids = sorted(ids)
    if n is None:
        return ids
    if n > len(ids):
        raise ConfigurationError(f"subset size {n} exceeds dataset size {len(ids)}")
    rng = np.random.default_rng(stable_hash("subset", seed))
    return sorted(ids[i] for i in rng.choice(len(ids), size=n, replace=False))


def evaluate_model(model: Denoiser, schedule: NoiseSchedule, dataset: CaptionedDataset,
                   config: EvalConfig, autoencoder: Autoencoder | None = None,
                   ids: Sequence[str] | None = None,
                   match_keys: dict[str, list[tuple[float, ...]]] | None = None) -> MemorizationReport:
    """Evaluate a subset of ``dataset`` (one shared subset for every delta).

    Every query runs all ``repeats`` trials so the report can hold the
    minimum distance; an image counts at ``delta`` when any trial is within
    it.  ``match_keys`` replaces an image's key by a list of acceptable
    keys (nearest key wins), used for duplicated images.
    """
    keymap = dataset.keymap
    if keymap is None:
        raise IntegrityError("dataset has no keymap")
    index = dataset.by_id()
    chosen = sorted(ids) if ids is not None else select_subset(list(index), config.subset_size, config.seed)
    for i in chosen:
        if i not in index:
            raise IntegrityError(f"id {i!r} not in dataset")
        if i not in keymap:
            raise IntegrityError(f"no key for image id {i!r}")
    items = [index[i] for i in chosen]
    preds = [predict_keys(model, schedule, items, t, config, dataset.pattern, autoencoder)
             for t in range(1, config.repeats + 1)]
    rows = []
    for j, it in enumerate(items):
        keys = match_keys[it.id] if match_keys and it.id in match_keys else [keymap[it.id]]
        p = [tuple(float(c) for c in preds[t][j]) for t in range(config.repeats)]
        d = [_distance_to_keys(preds[t][j], keys) for t in range(config.repeats)]
        rows.append(ImageRow(it.id, tuple(keymap[it.id]), p, d))
    counts = eidetic_counts([r.min_distance for r in rows], config.thresholds)
    return MemorizationReport(rows, config.thresholds, counts, config.to_json(), config.seed)
