"""Memorization distances and scoring strategies.

Distances (lower = more memorized): normalized l2, nearest-neighbour
rescaled l2 and its patched variant, and the key distance used by
SolidMark.  Similarities (higher = more memorized): embedding dot products.
The two kinds are never mixed in one report column.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import (
    ConfigurationError,
    DegenerateInputError,
    DimensionError,
    DomainError,
    EmbedderError,
)

DEFAULT_THRESHOLDS = (0.1, 0.05, 0.005)
METRIC_NAMES = ("l2", "modified_l2", "patched_modified_l2", "embedding_similarity", "key_distance")


def _flat(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1)


def l2_normalized(a, b) -> float:
    """``sqrt(sum((a - b)^2) / d)`` over all ``d`` entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = (a - b).reshape(1, -1)
    # scale first so tiny differences do not square to zero
    m = float(np.max(np.abs(diff))) if diff.size else 0.0
    if m == 0.0:
        return 0.0
    return m * float(kernels.pairwise_l2(diff / m, np.zeros_like(diff))[0, 0])


def l2_to_all(gen, train) -> np.ndarray:
    gen = np.asarray(gen, dtype=np.float64)
    train = np.asarray(train, dtype=np.float64)
    if train.shape[1:] != gen.shape:
        raise DimensionError(f"generation {gen.shape} vs training images {train.shape[1:]}")
    return kernels.pairwise_l2(gen.reshape(1, -1), train.reshape(train.shape[0], -1))[0]


# --------------------------------------------------------------------------
# nearest neighbours


@dataclass
class NeighborSet:
    ids: list
    distances: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def _ids(n: int, ids) -> list:
    if ids is None:
        return list(range(n))
    ids = list(ids)
    if len(ids) != n:
        raise DimensionError(f"{len(ids)} ids for {n} images")
    return ids


def rank_neighbors(distances: np.ndarray, ids: Sequence, n: int) -> NeighborSet:
    """The ``n`` smallest distances, ties broken by id order."""
    distances = np.asarray(distances, dtype=np.float64)
    if n < 1 or n > distances.size:
        raise ConfigurationError(f"n must be in [1, {distances.size}], got {n}")
    rank = {v: r for r, v in enumerate(sorted(ids))}
    id_rank = np.array([rank[i] for i in ids])
    order = np.lexsort((id_rank, distances))[:n]
    return NeighborSet([ids[i] for i in order], distances[order])


def nearest_neighbors(gen, train, n: int, base_metric: str | Callable = "l2", ids=None) -> NeighborSet:
    """Exact ``n``-NN of ``gen`` among the stacked ``train`` images."""
    train = np.asarray(train, dtype=np.float64)
    if n > train.shape[0]:
        raise ConfigurationError(f"n = {n} exceeds dataset size {train.shape[0]}")
    ids = _ids(train.shape[0], ids)
    if base_metric == "l2":
        d = l2_to_all(gen, train)
    elif callable(base_metric):
        d = np.array([base_metric(gen, t) for t in train], dtype=np.float64)
    else:
        raise ConfigurationError(f"unknown base metric {base_metric!r}")
    return rank_neighbors(d, ids, n)


def rescale_by_neighbors(distances: np.ndarray, n: int, alpha: float) -> float:
    """``d_nn / (alpha * mean(d over the n nearest))``; the mean includes the nearest itself."""
    if alpha <= 0:
        raise ConfigurationError(f"alpha must be positive, got {alpha}")
    d = np.sort(np.asarray(distances, dtype=np.float64))
    if n < 1 or n > d.size:
        raise ConfigurationError(f"n must be in [1, {d.size}], got {n}")
    mean = d[:n].mean()
    if mean == 0.0:
        raise DegenerateInputError(f"generation coincides with all {n} nearest training images")
    return float(d[0] / (alpha * mean))


def modified_l2(gen, train, n: int = 50, alpha: float = 0.5) -> float:
    """Nearest-neighbour l2 rescaled by the mean l2 to the ``n`` nearest neighbours."""
    return rescale_by_neighbors(l2_to_all(gen, train), n, alpha)


# --------------------------------------------------------------------------
# patches

PATCH_READINGS = {"corresponding": 0, "best_match": 1, "all_pairs": 2}


def center_crop_divisible(x: np.ndarray, grid: int) -> np.ndarray:
    h, w = x.shape[-2:]
    hh, ww = (h // grid) * grid, (w // grid) * grid
    if hh == 0 or ww == 0:
        raise DimensionError(f"{h}x{w} image too small for a {grid}x{grid} patch grid")
    top, left = (h - hh) // 2, (w - ww) // 2
    return x[..., top:top + hh, left:left + ww]


def to_patches(x: np.ndarray, grid: int = 4) -> np.ndarray:
    """(..., C, H, W) -> (..., grid*grid, C*ph*pw), center-cropping to a divisible size."""
    x = center_crop_divisible(np.asarray(x, dtype=np.float64), grid)
    *lead, c, h, w = x.shape
    ph, pw = h // grid, w // grid
    y = x.reshape(*lead, c, grid, ph, grid, pw)
    nl = len(lead)
    y = np.moveaxis(y, [nl + 1, nl + 3], [nl, nl + 1])  # (..., gy, gx, c, ph, pw)
    return y.reshape(*lead, grid * grid, c * ph * pw)


def patched_distances(gen, train, patch_grid: int = 4, reading: str = "corresponding") -> np.ndarray:
    if reading not in PATCH_READINGS:
        raise ConfigurationError(f"patch reading must be one of {sorted(PATCH_READINGS)}, got {reading!r}")
    g = to_patches(np.asarray(gen)[None], patch_grid)
    t = to_patches(np.asarray(train), patch_grid)
    return kernels.patched_pairwise(g, t, PATCH_READINGS[reading])[0]


def patched_modified_l2(gen, train, patch_grid: int = 4, n: int = 50, alpha: float = 0.5,
                        reading: str = "corresponding") -> float:
    """Modified l2 on patch-level image distances.

    ``corresponding`` takes the maximum l2 over the patch pairs that share a
    grid cell, so identical images are at distance 0.  ``best_match`` takes,
    for each generation patch, its closest training patch and then the worst
    of those.  ``all_pairs`` takes the maximum over every (generation patch,
    training patch) combination; it is not zero for identical textured
    images and is kept only for comparison.
    """
    return rescale_by_neighbors(patched_distances(gen, train, patch_grid, reading), n, alpha)


# --------------------------------------------------------------------------
# embeddings


class ToyEmbedder:
    """Deterministic stand-in for a copy-detection encoder.

    Average-pools to ``size x size`` per channel, flattens, subtracts the
    mean and normalizes to unit length.  Constant images have no direction
    and map to the zero vector's fallback (first basis vector).
    """

    def __init__(self, size: int = 8):
        self.size = size

    @property
    def dim(self) -> int:
        return 3 * self.size * self.size

    def __call__(self, image) -> np.ndarray:
        x = np.asarray(image, dtype=np.float64)
        if x.shape[0] == 1:
            x = np.repeat(x, 3, axis=0)
        x = center_crop_divisible(x, self.size)
        c, h, w = x.shape
        v = x.reshape(c, self.size, h // self.size, self.size, w // self.size).mean(axis=(2, 4)).reshape(-1)
        v = v - v.mean()
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            out = np.zeros_like(v)
            out[0] = 1.0
            return out
        return v / norm


def embedding_similarity(gen, train_image, embedder) -> float:
    """Dot product of unit-norm embeddings."""
    e1 = np.asarray(embedder(gen), dtype=np.float64)
    e2 = np.asarray(embedder(train_image), dtype=np.float64)
    for e in (e1, e2):
        if not np.all(np.isfinite(e)):
            raise EmbedderError("embedder returned non-finite values")
        if abs(np.linalg.norm(e) - 1.0) > 1e-6:
            raise EmbedderError(f"embedding is not unit norm (|e| = {np.linalg.norm(e):.6g})")
    return float(np.clip(e1 @ e2, -1.0, 1.0))


# --------------------------------------------------------------------------
# keys and scoring


def key_distance(k_hat, k) -> float:
    """Mean absolute difference over key components (plain |k_hat - k| for grayscale)."""
    a = np.atleast_1d(np.asarray(k_hat, dtype=np.float64))
    b = np.atleast_1d(np.asarray(k, dtype=np.float64))
    if a.shape != b.shape:
        raise DimensionError(f"key shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def _values(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise DomainError("cannot score an empty set of values")
    return v


def score_percentile(values, q: float = 0.95) -> float:
    """Nearest-rank percentile: the ceil(q * N)-th smallest value."""
    v = np.sort(_values(values))
    if not 0 < q <= 1:
        raise ConfigurationError(f"q must lie in (0, 1], got {q}")
    # the epsilon keeps q*N from landing one rank high through rounding (0.95*100 = 95.00000000000001)
    rank = max(1, math.ceil(q * v.size - 1e-9))
    return float(v[rank - 1])


def score_max(values) -> float:
    return float(np.max(_values(values)))


def count_eidetic(distances, delta: float) -> int:
    """Number of distances at or below ``delta``."""
    if not 0 < delta < 1:
        raise ConfigurationError(f"delta must lie in (0, 1), got {delta}")
    return int(kernels.count_at_most(_flat(distances), np.array([float(delta)]))[0])


def eidetic_counts(distances, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> dict[float, int]:
    ts = validate_thresholds(thresholds)
    counts = kernels.count_at_most(_flat(distances), np.asarray(ts))
    return {t: int(c) for t, c in zip(ts, counts)}


def count_similar(similarities, threshold: float) -> int:
    """Similarity-side eidetic count: values at or above ``threshold``."""
    return int(np.sum(_flat(similarities) >= threshold))


def validate_thresholds(thresholds: Sequence[float]) -> tuple[float, ...]:
    ts = tuple(float(t) for t in thresholds)
    if not ts:
        raise ConfigurationError("threshold set is empty")
    for t in ts:
        if not 0 < t < 1:
            raise ConfigurationError(f"every delta must lie in (0, 1), got {t}")
    return tuple(sorted(set(ts), reverse=True))


# --------------------------------------------------------------------------
# reports


@dataclass
class DistanceRecord:
    generation_id: str
    nearest_id: str
    value: float
    metric: str

    def __post_init__(self):
        if self.metric not in METRIC_NAMES:
            raise ConfigurationError(f"unknown metric {self.metric!r}")
        if not math.isfinite(self.value) or (self.metric != "embedding_similarity" and self.value < 0):
            raise DomainError(f"invalid {self.metric} value {self.value}")


@dataclass
class ScoreReport:
    """Per-metric aggregate scores.  ``kind`` is "distance" or "similarity"."""

    metric: str
    kind: str
    sample_size: int
    percentile_95: float
    maximum: float
    eidetic: dict[float, int] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Sequence[DistanceRecord],
                     thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> "ScoreReport":
        if not records:
            raise DomainError("no records to score")
        metrics = {r.metric for r in records}
        if len(metrics) != 1:
            raise ConfigurationError(f"records mix metrics {sorted(metrics)}")
        metric = metrics.pop()
        vals = np.array([r.value for r in records])
        if metric == "embedding_similarity":
            eid = {float(t): count_similar(vals, t) for t in validate_thresholds(thresholds)}
            kind = "similarity"
        else:
            eid = eidetic_counts(vals, thresholds)
            kind = "distance"
        return cls(metric, kind, len(vals), score_percentile(vals, 0.95), score_max(vals), eid)

    def to_json(self) -> dict:
        return {"metric": self.metric, "kind": self.kind, "sample_size": self.sample_size,
                "percentile_95": self.percentile_95, "maximum": self.maximum,
                "eidetic": {repr(k): v for k, v in self.eidetic.items()}}


def records_to_csv(records: Sequence[DistanceRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["generation_id", "nearest_id", "metric", "value"])
    for r in records:
        w.writerow([r.generation_id, r.nearest_id, r.metric, repr(float(r.value))])
    return buf.getvalue()


def reports_summary(reports: Sequence[ScoreReport]) -> str:
    return json.dumps([r.to_json() for r in reports], indent=1, sort_keys=True) + "\n"
