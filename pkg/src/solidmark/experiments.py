"""Desk-scale versions of the SolidMark experiments plus the calibration
oracles and the metric-pathology fixtures."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .diffusion import (
    NoiseSchedule,
    TrainConfig,
    make_linear_schedule,
    new_state,
    perturb_condition_gni,
    train,
)
from .errors import ConfigurationError
from .imgdata import (
    CLASS_NAMES,
    GRID,
    CaptionedDataset,
    PatternSpec,
    QueryTransform,
    apply_pattern,
    build_pattern_mask,
    assign_keys,
    gen_synthetic_dataset,
    inject_duplicates,
    key_groups,
    quantize,
    stable_hash,
    training_images,
)
from .memorization import EvalConfig, MemorizationReport, evaluate_model, fp_rate
from .metrics import (
    count_eidetic,
    eidetic_counts,
    count_similar,
    l2_to_all,
    modified_l2,
    patched_modified_l2,
    score_percentile,
)


def fp_rate_closed_form(delta: float, grid: bool = False) -> float:
    """``2 delta - delta^2``; ``grid=True`` gives the 256-level-grid rate."""
    return fp_rate(delta, grid=grid)


def binomial_se(p: float, n: int) -> float:
    return math.sqrt(p * (1 - p) / n)


# --------------------------------------------------------------------------
# oracles


class OracleModel:
    """Denoiser stand-in with a known answer, used to calibrate the pipeline.

    It predicts the noise that points at a chosen clean image: the query
    interior plus a constant pattern.  ``memorizing`` oracles put the true
    key there for ids in ``memorized_ids`` (all ids by default) and behave
    like the unmemorized oracle elsewhere.  ``unmemorized`` oracles draw a
    grid-uniform constant from a hash of the current noisy input, i.e. one
    independent draw per outpainting trial.
    """

    conditional = False

    def __init__(self, kind: str, dataset: CaptionedDataset, spec: PatternSpec, schedule: NoiseSchedule,
                 memorized_ids: Sequence[str] | None = None, seed: int = 0):
        if kind not in ("memorizing", "unmemorized"):
            raise ConfigurationError(f"oracle kind must be 'memorizing' or 'unmemorized', got {kind!r}")
        if dataset.keymap is None:
            raise ConfigurationError("oracle needs a dataset with a keymap")
        self.kind = kind
        self.spec = spec
        self.schedule = schedule
        self.seed = seed
        self.keymap = dataset.keymap
        interiors = dataset.interiors()
        h, w = spec.augmented_dims(*interiors.shape[-2:])
        self.image_shape = (interiors.shape[1], h, w)
        self.mask = build_pattern_mask(spec, (h, w)).astype(bool)
        self.ids = dataset.ids()
        ids = set(self.ids if memorized_ids is None else memorized_ids)
        self.memorized = np.array([i in ids for i in self.ids])
        self.n_components = 1 if spec.color_mode == "grayscale" else 3
        # query regions in model space, flattened for nearest-neighbour lookup
        q = np.stack([apply_pattern(x, (0.0,) * self.n_components, spec) for x in interiors])
        self._known = (2 * q - 1)[:, :, ~self.mask].reshape(len(q), -1)
        self.calls = 0

    def _identify(self, known_xt: np.ndarray, ab: float) -> np.ndarray:
        est = known_xt / math.sqrt(ab)
        return np.argmin(kernels.pairwise_l2(est, self._known), axis=1)

    def _random_level(self, x: np.ndarray) -> np.ndarray:
        h = stable_hash("oracle", self.seed, np.round(x, 6).tobytes())
        return np.random.default_rng(h).integers(0, GRID + 1, size=self.n_components) / GRID

    def predict_eps(self, x_t, t, cond):
        self.calls += 1
        n = x_t.shape[0]
        ab = float(self.schedule.alpha_bars[int(t[0]) - 1])
        known = x_t[:, :, ~self.mask].reshape(n, -1)
        x0 = x_t / math.sqrt(ab)
        border = np.empty((n, self.n_components))
        if self.kind == "memorizing":
            who = self._identify(known, ab)
        for i in range(n):
            if self.kind == "memorizing" and self.memorized[who[i]]:
                border[i] = self.keymap[self.ids[who[i]]]
            else:
                border[i] = self._random_level(x_t[i])
        comp = border if self.n_components == 3 else np.repeat(border, x_t.shape[1], axis=1)
        x0[:, :, self.mask] = (2 * comp - 1)[:, :, None]
        return (x_t - math.sqrt(ab) * x0) / math.sqrt(1 - ab)


def oracle_dataset(count: int, base_size: int = 8, seed: int = 0, key_seed: int = 1) -> CaptionedDataset:
    ds = gen_synthetic_dataset(count, base_size, 3, seed)
    return ds.replace(keymap=assign_keys(ds, key_seed))


# --------------------------------------------------------------------------
# experiment bookkeeping


@dataclass
class Arm:
    name: str
    counts: dict[float, int]
    n: int
    status: str = "ok"
    extra: dict = field(default_factory=dict)


@dataclass
class ExperimentRun:
    name: str
    config: dict
    seeds: dict
    thresholds: tuple[float, ...]
    arms: list[Arm] = field(default_factory=list)
    baseline: str | None = None
    reports: dict[str, MemorizationReport] = field(default_factory=dict)

    def arm(self, name: str) -> Arm:
        for a in self.arms:
            if a.name == name:
                return a
        raise KeyError(name)

    def percent_change(self, name: str, delta: float) -> float | None:
        """``100 * (new - old) / old`` against the baseline arm (None when old is 0)."""
        if self.baseline is None:
            return None
        old = self.arm(self.baseline).counts[delta]
        new = self.arm(name).counts[delta]
        return None if old == 0 else 100.0 * (new - old) / old

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        head = ["arm", "status", "n"]
        for d in self.thresholds:
            head += [f"count@{d:g}", f"fraction@{d:g}", f"pct_change@{d:g}"]
        w.writerow(head)
        for a in self.arms:
            row = [a.name, a.status, a.n]
            for d in self.thresholds:
                if a.status != "ok":
                    row += ["", "", ""]
                    continue
                pc = self.percent_change(a.name, d)
                row += [a.counts[d], repr(a.counts[d] / a.n) if a.n else "",
                        "" if pc is None else repr(pc)]
            w.writerow(row)
        return buf.getvalue()

    def summary(self) -> dict:
        return {"name": self.name, "config": self.config, "seeds": self.seeds,
                "thresholds": list(self.thresholds), "baseline": self.baseline,
                "arms": [{"name": a.name, "status": a.status, "n": a.n,
                          "counts": {repr(k): v for k, v in a.counts.items()},
                          "pct_change": {repr(d): self.percent_change(a.name, d) for d in self.thresholds}
                          if a.status == "ok" else {},
                          "extra": a.extra} for a in self.arms]}

    def summary_text(self) -> str:
        return json.dumps(self.summary(), indent=1, sort_keys=True) + "\n"

    def plot_data(self, delta: float) -> str:
        """``x,y`` series (arm name, fraction) for external plotting."""
        lines = ["x,y"]
        lines += [f"{a.name},{a.counts[delta] / a.n!r}" for a in self.arms if a.status == "ok" and a.n]
        return "\n".join(lines) + "\n"


def _arm_from_report(name: str, report: MemorizationReport, **extra) -> Arm:
    return Arm(name, dict(report.counts), report.n, extra=extra)


def _run_arm(run: ExperimentRun, name: str, evaluate: Callable[[], MemorizationReport], **extra) -> None:
    """Evaluate one arm; a failure marks only that arm."""
    try:
        rep = evaluate()
    except Exception as exc:  # arm isolation: record and continue
        run.arms.append(Arm(name, {}, 0, status=f"failed: {type(exc).__name__}: {exc}"))
        return
    run.arms.append(_arm_from_report(name, rep, **extra))
    run.reports[name] = rep


# --------------------------------------------------------------------------
# training helper


Trainer = Callable[[CaptionedDataset, PatternSpec], tuple[object, NoiseSchedule]]


def diffusion_trainer(config: TrainConfig, log=None) -> Trainer:
    """Trainer that fits a fresh TinyUNet on the pattern-augmented dataset."""

    def fit(dataset: CaptionedDataset, spec: PatternSpec):
        x = training_images(dataset, spec)
        state = new_state(config, x.shape[1:])
        train(state, x, [it.caption for it in dataset.items], log=log)
        return state.denoiser(), state.schedule

    return fit


def oracle_trainer(kind: str = "unmemorized", memorized_ids=None, seed: int = 0, T: int = 50) -> Trainer:
    def fit(dataset: CaptionedDataset, spec: PatternSpec):
        sched = make_linear_schedule(T, 1e-4, 0.2)
        return OracleModel(kind, dataset, spec, sched, memorized_ids, seed), sched

    return fit


# --------------------------------------------------------------------------
# duplication


@dataclass
class DuplicationFixture:
    dataset: CaptionedDataset
    level_ids: dict[int, list[str]]


def duplication_fixture(base: CaptionedDataset, levels: Sequence[int] = (1, 4, 16), per_level: int = 10,
                        independent_keys: bool = True, key_seed: int = 11) -> DuplicationFixture:
    """Duplicate ``per_level`` distinct originals to each level > 1.

    Level 1 holds every original that was not duplicated.
    """
    ds = base if base.keymap is not None else base.replace(keymap=assign_keys(base, key_seed))
    ids = ds.ids()
    dup_levels = sorted(l for l in levels if l > 1)
    if per_level * len(dup_levels) > len(ids):
        raise ConfigurationError("not enough images for the requested duplication levels")
    level_ids: dict[int, list[str]] = {}
    pos = 0
    for lvl in dup_levels:
        chosen = ids[pos:pos + per_level]
        pos += per_level
        ds = inject_duplicates(ds, chosen, lvl, independent_keys=independent_keys)
        level_ids[lvl] = chosen
    if 1 in levels:
        level_ids[1] = ids[pos:]
    return DuplicationFixture(ds, dict(sorted(level_ids.items())))


def run_duplication_study(base_dataset: CaptionedDataset, duplication_counts: Sequence[int],
                          trainer: Trainer, eval_config: EvalConfig, per_level: int = 10,
                          independent_keys: bool = True, level1_limit: int | None = None) -> ExperimentRun:
    """Train once on the duplicated set; per level, the fraction of originals
    whose outpainted key matches any of the keys their copies carry."""
    counts = [int(c) for c in duplication_counts]
    if any(c < 1 for c in counts):
        raise ConfigurationError(f"duplication counts must be >= 1, got {counts}")
    fx = duplication_fixture(base_dataset, counts, per_level, independent_keys)
    model, sched = trainer(fx.dataset, eval_config.pattern)
    groups = key_groups(fx.dataset)
    km = fx.dataset.keymap
    run = ExperimentRun("duplication", {"levels": counts, "per_level": per_level,
                                        "independent_keys": independent_keys, "eval": eval_config.to_json()},
                        {"eval": eval_config.seed}, eval_config.thresholds)
    for lvl, ids in fx.level_ids.items():
        if lvl == 1 and level1_limit is not None:
            ids = ids[:level1_limit]
        match = {i: [km[g] for g in groups[i]] for i in ids}
        rep = evaluate_model(model, sched, fx.dataset, eval_config, ids=ids, match_keys=match)
        chance = {repr(d): 1 - (1 - fp_rate(d)) ** (lvl * eval_config.repeats) for d in run.thresholds}
        own = eidetic_counts([min(float(np.mean(np.abs(np.subtract(p, r.true_key)))) for p in r.predicted)
                              for r in rep.rows], run.thresholds)
        run.arms.append(_arm_from_report(f"x{lvl}", rep, level=lvl, chance_any_key=chance,
                                         own_key_counts={repr(d): c for d, c in own.items()}))
        run.reports[f"x{lvl}"] = rep
    return run


# --------------------------------------------------------------------------
# augmentation robustness


def run_augmentation_study(model, schedule: NoiseSchedule, dataset: CaptionedDataset, eval_config: EvalConfig,
                           transforms: Sequence[QueryTransform | str], ids=None) -> ExperimentRun:
    parsed = [t if isinstance(t, QueryTransform) else QueryTransform.parse(t) for t in transforms]
    run = ExperimentRun("augmentation", {"transforms": [t.name for t in parsed], "eval": eval_config.to_json()},
                        {"eval": eval_config.seed}, eval_config.thresholds, baseline="identity")
    _run_arm(run, "identity", lambda: evaluate_model(
        model, schedule, dataset, _with(eval_config, query_transform=QueryTransform()), ids=ids))
    for t in parsed:
        if t.is_identity:
            continue
        cfg = _with(eval_config, query_transform=t, label=t.name)
        _run_arm(run, t.name, lambda cfg=cfg: evaluate_model(model, schedule, dataset, cfg, ids=ids))
    return run


def _with(config: EvalConfig, **changes) -> EvalConfig:
    import dataclasses

    return dataclasses.replace(config, **changes)


# --------------------------------------------------------------------------
# mitigation


VOCABULARY = tuple(CLASS_NAMES) + (
    "photo", "picture", "image", "of", "a", "the", "bright", "dark", "small", "large", "red", "blue",
    "green", "old", "new", "shape", "pattern", "texture", "drawing", "art", "scene", "simple")


def random_token_replacement(caption: str, iterations: int, seed: int, p_replace: float = 0.1) -> str:
    """Each iteration: replace every token with prob ``p_replace`` and add one random word."""
    rng = np.random.default_rng(stable_hash("rt", seed))
    tokens = caption.split()
    for _ in range(iterations):
        tokens = [VOCABULARY[rng.integers(len(VOCABULARY))] if rng.random() < p_replace else tok
                  for tok in tokens]
        tokens.insert(int(rng.integers(0, len(tokens) + 1)), VOCABULARY[rng.integers(len(VOCABULARY))])
    return " ".join(tokens)


def caption_word_repetition(caption: str, iterations: int, seed: int) -> str:
    """Each iteration: copy one word of the caption into one extra random spot."""
    rng = np.random.default_rng(stable_hash("cwr", seed))
    tokens = caption.split()
    for _ in range(iterations):
        word = tokens[int(rng.integers(len(tokens)))]
        tokens.insert(int(rng.integers(0, len(tokens) + 1)), word)
    return " ".join(tokens)


RNA_MAX = 10 ** 6


def random_number_addition(caption: str, iterations: int, seed: int) -> str:
    """Each iteration: insert a random integer from {0, ..., 10^6} at a random spot."""
    rng = np.random.default_rng(stable_hash("rna", seed))
    tokens = caption.split()
    for _ in range(iterations):
        tokens.insert(int(rng.integers(0, len(tokens) + 1)), str(int(rng.integers(0, RNA_MAX + 1))))
    return " ".join(tokens)


CAPTION_METHODS = {"rt": random_token_replacement, "cwr": caption_word_repetition,
                   "rna": random_number_addition}


def mitigation_config(eval_config: EvalConfig, method: str, strength) -> EvalConfig:
    method = method.lower()
    label = f"{method}:{strength:g}"
    if method == "gni":
        mag = float(strength)
        if mag < 0:
            raise ConfigurationError(f"GNI magnitude must be >= 0, got {mag}")
        return _with(eval_config, label=label,
                     embedding_transform=None if mag == 0 else
                     (lambda c, s, mag=mag: perturb_condition_gni(c, mag, s)))
    if method in CAPTION_METHODS:
        fn, it = CAPTION_METHODS[method], int(strength)
        return _with(eval_config, label=label, caption_transform=lambda cap, s, fn=fn, it=it: fn(cap, it, s))
    raise ConfigurationError(f"unknown mitigation method {method!r}; choose from gni, rt, cwr, rna")


def run_mitigation_study(model, schedule: NoiseSchedule, dataset: CaptionedDataset, eval_config: EvalConfig,
                         methods: dict[str, Sequence[float]], ids=None) -> ExperimentRun:
    """``methods`` maps gni/rt/cwr/rna to a sweep (magnitudes or iteration counts)."""
    for m in methods:
        if m.lower() not in ("gni",) + tuple(CAPTION_METHODS):
            raise ConfigurationError(f"unknown mitigation method {m!r}; choose from gni, rt, cwr, rna")
    run = ExperimentRun("mitigation", {"methods": {k: list(v) for k, v in methods.items()},
                                       "eval": eval_config.to_json()},
                        {"eval": eval_config.seed}, eval_config.thresholds, baseline="baseline")
    _run_arm(run, "baseline", lambda: evaluate_model(
        model, schedule, dataset, _with(eval_config, label="baseline"), ids=ids))
    for method, sweep in methods.items():
        for strength in sweep:
            cfg = mitigation_config(eval_config, method, strength)
            _run_arm(run, cfg.label, lambda cfg=cfg: evaluate_model(model, schedule, dataset, cfg, ids=ids))
    return run


# --------------------------------------------------------------------------
# ablations


def run_ablation(kind: str, configs: Sequence, base_dataset: CaptionedDataset, trainer: Trainer,
                 eval_config: EvalConfig) -> ExperimentRun:
    """One model per pattern variant.

    kind ``thickness``: configs are border thicknesses; ``placement``:
    (placement, size) pairs; ``color``: color modes.
    """
    if kind not in ("thickness", "placement", "color"):
        raise ConfigurationError(f"unknown ablation {kind!r}")
    run = ExperimentRun(f"ablation-{kind}", {"kind": kind, "configs": [list(c) if isinstance(c, tuple) else c
                                                                       for c in configs],
                                             "eval": eval_config.to_json()},
                        {"eval": eval_config.seed}, eval_config.thresholds)
    for value in configs:
        if kind == "thickness":
            spec = PatternSpec("border", int(value), eval_config.pattern.color_mode)
        elif kind == "placement":
            placement, size = value
            spec = PatternSpec(placement, int(size), eval_config.pattern.color_mode)
        else:
            spec = PatternSpec(eval_config.pattern.placement, eval_config.pattern.thickness, str(value))
        name = f"{kind}={value[0]}:{value[1]}" if kind == "placement" else f"{kind}={value}"
        ds = base_dataset
        if ds.keymap is None or ds.keymap.color_mode != spec.color_mode:
            ds = ds.replace(keymap=assign_keys(ds, eval_config.seed + 1, spec.color_mode))

        def arm(ds=ds, spec=spec, name=name):
            model, sched = trainer(ds, spec)
            return evaluate_model(model, sched, ds, _with(eval_config, pattern=spec, label=name))

        _run_arm(run, name, arm)
        if spec.color_mode == "rgb" and name in run.reports:
            run.arm(name).extra["channel_spread"] = channel_spread(run.reports[name])
    return run


def channel_spread(report: MemorizationReport) -> float:
    """Mean over predictions of (max - min) across rgb components; 0 means grayscale output."""
    spreads = [max(p) - min(p) for row in report.rows for p in row.predicted]
    return float(np.mean(spreads))


# --------------------------------------------------------------------------
# fixtures for the metric pathologies


@dataclass
class PathologyDemo:
    dist_a: np.ndarray
    dist_b: np.ndarray
    demonstration: dict


def percentile_pathology_fixture(seed: int = 0, n: int = 1000, threshold: float = 0.9) -> PathologyDemo:
    """Two similarity samples with the same 95th but different 96th percentile.

    ``dist_b`` equals ``dist_a`` except that everything above the 95th
    percentile is pulled 70% of the way down onto it, a memorization
    reduction the 95th percentile cannot see.
    """
    rng = np.random.default_rng(stable_hash("pathology", seed))
    # bulk stays below the threshold; only the tail crosses it
    a = np.sort(threshold * 0.95 * rng.beta(8.0, 2.0, size=n))
    # push the tail up so it clears the eidetic threshold
    k95 = math.ceil(0.95 * n - 1e-9)
    a[k95:] = np.sort(rng.uniform(max(threshold, a[k95 - 1]) + 0.01, 1.0, size=n - k95))
    p95 = a[k95 - 1]
    b = a.copy()
    b[k95:] = p95 + 0.3 * (a[k95:] - p95)
    perm = rng.permutation(n)
    a, b = a[perm], b[perm]
    demo = {
        "p95_a": score_percentile(a, 0.95), "p95_b": score_percentile(b, 0.95),
        "p96_a": score_percentile(a, 0.96), "p96_b": score_percentile(b, 0.96),
        "threshold": threshold,
        "count_above_a": count_similar(a, threshold), "count_above_b": count_similar(b, threshold),
        # as distances (1 - similarity)
        "eidetic_delta": round(1 - threshold, 12),
        "eidetic_a": count_eidetic(1 - a, round(1 - threshold, 12)),
        "eidetic_b": count_eidetic(1 - b, round(1 - threshold, 12)),
    }
    return PathologyDemo(a, b, demo)


@dataclass
class MonochromeDemo:
    dataset: np.ndarray
    gen_mono: np.ndarray
    gen_textured: np.ndarray
    demonstration: dict


def monochrome_bias_fixture(seed: int = 0, size: int = 16, n_mono: int = 60, n_textured: int = 60,
                            n_neighbors: int = 50, alpha: float = 0.5) -> MonochromeDemo:
    """Training set with a dense cluster of near-solid images plus textured ones.

    A new near-solid generation sits close to many cluster members, so its
    nearest neighbour is much nearer than the neighbourhood average and the
    rescaled distance is small even though it copies nothing.  A new
    textured generation is far from everything, nearest included.
    """
    rng = np.random.default_rng(stable_hash("monobias", seed))
    mono_levels = np.linspace(0.2, 0.8, n_mono)
    mono = [quantize(np.full((3, size, size), v) + rng.normal(0, 0.01, (3, size, size))) for v in mono_levels]
    textured = [quantize(rng.uniform(0, 1, (3, size, size))) for _ in range(n_textured)]
    data = np.stack(mono + textured)
    mid = (mono_levels[n_mono // 2] + mono_levels[n_mono // 2 + 1]) / 2
    gen_mono = quantize(np.full((3, size, size), mid) + rng.normal(0, 0.01, (3, size, size)))
    gen_textured = quantize(rng.uniform(0, 1, (3, size, size)))
    demo = {
        "modified_l2_mono": modified_l2(gen_mono, data, n_neighbors, alpha),
        "modified_l2_textured": modified_l2(gen_textured, data, n_neighbors, alpha),
        "patched_mono": patched_modified_l2(gen_mono, data, 4, n_neighbors, alpha),
        "patched_textured": patched_modified_l2(gen_textured, data, 4, n_neighbors, alpha),
        "patched_best_match_mono": patched_modified_l2(gen_mono, data, 4, n_neighbors, alpha, "best_match"),
        "patched_best_match_textured": patched_modified_l2(gen_textured, data, 4, n_neighbors, alpha,
                                                           "best_match"),
        "min_l2_mono": float(l2_to_all(gen_mono, data).min()),
        "min_l2_textured": float(l2_to_all(gen_textured, data).min()),
    }
    return MonochromeDemo(data, gen_mono, gen_textured, demo)
