"""Desk-scale DDPM: schedule, forward process, conditioning, training, sampling.

Timesteps are 1-based (``t = 1..T``); schedule arrays are indexed ``t - 1``.
The denoiser works on images rescaled from ``[0, 1]`` to ``[-1, 1]``; the
public ``sample`` function converts back and clamps.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, InputError, ModelError, TrainingError
from .imgdata import stable_hash

CHECKPOINT_VERSION = 1
EMBED_DIM = 32


# --------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    beta_start: float = 0.0
    beta_end: float = 0.0

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ConfigurationError("betas must be a non-empty 1-d array")
        if np.any(b <= 0) or np.any(b >= 1) or np.any(np.diff(b) < 0):
            raise ConfigurationError("betas must satisfy 0 < b_1 <= ... <= b_T < 1")
        object.__setattr__(self, "betas", b)

    @property
    def T(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(self.betas)

    def alpha_bar(self, t: int) -> float:
        """``abar_t`` with the convention ``abar_0 = 1``."""
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def strided(self, steps: int | None) -> list[int]:
        """Descending timesteps used by a ``steps``-step sampler (always ends at 1)."""
        if steps is None or steps >= self.T:
            return list(range(self.T, 0, -1))
        if steps < 1:
            raise ConfigurationError(f"sampling steps must be >= 1, got {steps}")
        ts = np.unique(np.round(np.linspace(1, self.T, steps)).astype(int))
        return [int(t) for t in ts[::-1]]

    def to_json(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    return NoiseSchedule(betas, beta_start, beta_end)


def forward_noise(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule,
                  literal: bool = False) -> np.ndarray:
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` may be a scalar or one timestep per leading-axis item.
    ``literal=True`` uses ``(1 - abar_t)`` as the noise coefficient instead.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ConfigurationError(f"t must lie in [1, {schedule.T}]")
    ab = schedule.alpha_bars[t_arr - 1]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    noise_coef = (1.0 - ab) if literal else np.sqrt(1.0 - ab)
    return np.sqrt(ab) * x0 + noise_coef * eps


def to_model_space(x: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(x, dtype=np.float64) - 1.0


def from_model_space(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x) + 1.0) / 2.0, 0.0, 1.0)


# --------------------------------------------------------------------------
# conditioning


def _token_vector(token: str, dim: int) -> np.ndarray:
    return np.random.default_rng(stable_hash("token", token)).standard_normal(dim)


def embed_condition(label_or_caption, dim: int = EMBED_DIM) -> np.ndarray:
    """Deterministic toy text/label embedder.

    Integers map to a per-class Gaussian vector.  Strings are a bag of
    lower-cased whitespace tokens: the mean of per-token Gaussian vectors.
    Either way the result is rescaled to norm ``sqrt(dim)`` (unit RMS).
    """
    if isinstance(label_or_caption, (int, np.integer)):
        v = np.random.default_rng(stable_hash("class", int(label_or_caption))).standard_normal(dim)
    else:
        tokens = str(label_or_caption).lower().split()
        if not tokens:
            raise InputError("empty caption cannot be embedded")
        v = np.mean([_token_vector(tok, dim) for tok in tokens], axis=0)
    return v * (math.sqrt(dim) / np.linalg.norm(v))


def embed_captions(captions: Sequence[str], dim: int = EMBED_DIM) -> np.ndarray:
    cache: dict[str, np.ndarray] = {}
    out = np.empty((len(captions), dim))
    for i, cap in enumerate(captions):
        if cap not in cache:
            cache[cap] = embed_condition(cap, dim)
        out[i] = cache[cap]
    return out


def perturb_condition_gni(c: np.ndarray, magnitude: float = 0.1, seed: int = 0) -> np.ndarray:
    """Gaussian noise at inference: ``c + N(0, magnitude^2)`` per component."""
    if magnitude < 0:
        raise ConfigurationError(f"GNI magnitude must be >= 0, got {magnitude}")
    c = np.asarray(c, dtype=np.float64)
    if magnitude == 0:
        return c.copy()
    rng = np.random.default_rng(stable_hash("gni", seed))
    return c + magnitude * rng.standard_normal(c.shape)


# --------------------------------------------------------------------------
# denoiser contract


class Denoiser(Protocol):
    """Anything that predicts the added noise from ``(x_t, t, c)``.

    ``x_t``: (N, C, H, W) in model space; ``t``: (N,) ints in [1, T];
    ``cond``: (N, D) or None.  Returns an array shaped like ``x_t``.
    """

    conditional: bool
    image_shape: tuple[int, int, int]

    def predict_eps(self, x_t: np.ndarray, t: np.ndarray, cond: np.ndarray | None) -> np.ndarray: ...


def call_denoiser(model: Denoiser, x_t: np.ndarray, t: int, cond: np.ndarray | None) -> np.ndarray:
    tt = np.full(x_t.shape[0], t, dtype=np.int64)
    eps = model.predict_eps(x_t, tt, cond if model.conditional else None)
    if eps.shape != x_t.shape:
        raise ModelError(f"denoiser returned shape {eps.shape}, expected {x_t.shape}")
    if not np.all(np.isfinite(eps)):
        raise ModelError(f"denoiser produced non-finite output at t={t}")
    return eps


def ancestral_step(x_t: np.ndarray, eps: np.ndarray, t: int, t_prev: int, schedule: NoiseSchedule,
                   noise: np.ndarray | None) -> np.ndarray:
    """One reverse step from ``t`` to ``t_prev`` with ``sigma^2 = beta``.

    For ``t_prev = t - 1`` this is the standard DDPM update; larger strides
    use the effective ``beta = 1 - abar_t / abar_prev``.
    """
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    alpha = ab_t / ab_prev
    beta = 1.0 - alpha
    out = (x_t - beta / math.sqrt(1.0 - ab_t) * eps) / math.sqrt(alpha)
    if noise is not None and t_prev > 0:
        out = out + math.sqrt(beta) * noise
    return out


class NoiseSource:
    """Per-item Gaussian streams, so results do not depend on batch composition."""

    def __init__(self, seeds: Sequence[int]):
        self.rngs = [np.random.default_rng(int(s) & 0xFFFFFFFFFFFFFFFF) for s in seeds]

    def __len__(self) -> int:
        return len(self.rngs)

    def normal(self, shape: tuple[int, ...]) -> np.ndarray:
        out = np.empty((len(self.rngs),) + tuple(shape))
        for i, r in enumerate(self.rngs):
            out[i] = r.standard_normal(shape)
        return out


def sample(model: Denoiser, c: np.ndarray | None, schedule: NoiseSchedule, seed: int | Sequence[int],
           steps: int | None = None, count: int | None = None) -> np.ndarray:
    """Ancestral sampling; returns images in ``[0, 1]``.

    ``seed`` is one seed per output image or a single base seed.  When the
    model is conditional ``c`` holds one embedding per image.
    """
    if isinstance(seed, (int, np.integer)):
        n = count if count is not None else (1 if c is None or np.ndim(c) == 1 else len(c))
        seeds = [stable_hash("sample", int(seed), i) for i in range(n)]
    else:
        seeds = list(seed)
    n = len(seeds)
    if c is not None:
        c = np.atleast_2d(np.asarray(c, dtype=np.float64))
        if c.shape[0] == 1 and n > 1:
            c = np.repeat(c, n, axis=0)
        if c.shape[0] != n:
            raise DimensionError(f"{c.shape[0]} condition vectors for {n} samples")
    elif model.conditional:
        raise InputError("conditional model needs condition embeddings")
    noise = NoiseSource(seeds)
    x = noise.normal(model.image_shape)
    ts = schedule.strided(steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps = call_denoiser(model, x, t, c)
        x = ancestral_step(x, eps, t, t_prev, schedule, noise.normal(model.image_shape) if t_prev else None)
    return from_model_space(x)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    channels: int = 32
    conditional: bool = True
    embed_dim: int = EMBED_DIM
    grad_clip: float = 1.0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "T", "channels", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainState:
    """Everything a checkpoint carries."""

    config: TrainConfig
    image_shape: tuple[int, int, int]
    module: object  # torch.nn.Module
    optimizer_state: dict | None = None
    epoch: int = 0
    loss_trace: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)  # e.g. the pattern spec trained with

    @property
    def schedule(self) -> NoiseSchedule:
        return self.config.schedule()

    def denoiser(self):
        from .unet import TorchDenoiser

        return TorchDenoiser(self.module, self.config.conditional, self.image_shape)


def new_state(config: TrainConfig, image_shape: tuple[int, int, int]) -> TrainState:
    import torch

    from .unet import TinyUNet

    torch.manual_seed(stable_hash("init", config.seed) & 0x7FFFFFFF)
    module = TinyUNet(image_shape[0], config.channels, config.embed_dim if config.conditional else 0)
    return TrainState(config, tuple(image_shape), module)


def train(state: TrainState, images: np.ndarray, captions: Sequence[str] | None = None,
          epochs: int | None = None, log=None) -> TrainState:
    """Epsilon-matching training on pattern-augmented images in ``[0, 1]``.

    Runs until ``state.epoch == epochs`` (default: the config's epoch count),
    so a state loaded from a checkpoint resumes where it stopped.  Each
    epoch draws its shuffling, timesteps and noise from ``(seed, epoch)``
    alone, which makes resumed and uninterrupted runs identical.
    """
    import torch

    cfg = state.config
    target = cfg.epochs if epochs is None else epochs
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or tuple(images.shape[1:]) != tuple(state.image_shape):
        raise TrainingError(f"images {images.shape[1:]} do not match model dims {state.image_shape}")
    n = images.shape[0]
    cond_all = None
    if cfg.conditional:
        if captions is None or len(captions) != n:
            raise TrainingError("conditional training needs one caption per image")
        cond_all = torch.from_numpy(embed_captions(captions, cfg.embed_dim)).float()
    x_all = torch.from_numpy(to_model_space(images)).float()
    abar = torch.from_numpy(cfg.schedule().alpha_bars).float()
    module = state.module
    opt = torch.optim.Adam(module.parameters(), lr=cfg.lr)
    if state.optimizer_state is not None:
        opt.load_state_dict(state.optimizer_state)
    module.train()
    step = len(state.loss_trace)
    while state.epoch < target:
        gen = torch.Generator().manual_seed(stable_hash("epoch", cfg.seed, state.epoch) & 0x7FFFFFFF)
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x0 = x_all[idx]
            t = torch.randint(1, cfg.T + 1, (len(idx),), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            ab = abar[t - 1].view(-1, 1, 1, 1)
            xt = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
            pred = module(xt, t, cond_all[idx] if cond_all is not None else None)
            loss = torch.mean((pred - eps) ** 2)
            if not torch.isfinite(loss):
                raise TrainingError("non-finite loss", step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(module.parameters(), cfg.grad_clip)
            opt.step()
            state.loss_trace.append(float(loss.item()))
            step += 1
        state.epoch += 1
        if log is not None:
            k = max(1, math.ceil(n / cfg.batch_size))
            log(f"epoch {state.epoch}/{target} loss {np.mean(state.loss_trace[-k:]):.5f}")
    module.eval()
    state.optimizer_state = opt.state_dict()
    return state


# --------------------------------------------------------------------------
# checkpoints


def _canonical(obj):
    """Fresh tensor storage, interned strings and sorted dict keys.

    Pickle memoizes by object identity, so equal states built along
    different paths (fresh vs resumed) only serialize identically after this.
    """
    import torch

    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, torch.Tensor):
        return obj.detach().clone().contiguous()
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(obj[k]) for k in sorted(obj, key=repr)}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_canonical(v) for v in obj)
    return obj


def save_checkpoint(state: TrainState, path) -> str:
    """Write a versioned checkpoint; returns its sha256 hex digest."""
    import torch

    blob = {
        "format": "solidmark-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_json(),
        "schedule": state.schedule.to_json(),
        "image_shape": list(state.image_shape),
        "mode": "conditional" if state.config.conditional else "unconditional",
        "epoch": state.epoch,
        "loss_trace": list(state.loss_trace),
        "model": state.module.state_dict(),
        "optimizer": state.optimizer_state,
        "extra": state.extra,
    }
    buf = io.BytesIO()
    torch.save(_canonical(blob), buf)
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> TrainState:
    import torch

    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format") != "solidmark-checkpoint":
        raise ModelError(f"{path} is not a solidmark checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {blob.get('version')}")
    cfg = TrainConfig(**blob["config"])
    state = new_state(cfg, tuple(blob["image_shape"]))
    state.module.load_state_dict(blob["model"])
    state.module.eval()
    for p in state.module.parameters():
        if not torch.all(torch.isfinite(p)):
            raise ModelError(f"checkpoint {path} holds non-finite parameters")
    state.optimizer_state = blob["optimizer"]
    state.epoch = int(blob["epoch"])
    state.loss_trace = list(blob["loss_trace"])
    state.extra = dict(blob.get("extra") or {})
    return state


def run_report(state: TrainState) -> str:
    return json.dumps({"config": state.config.to_json(), "seed": state.config.seed,
                       "image_shape": list(state.image_shape), "epoch": state.epoch,
                       "loss_trace": state.loss_trace}, indent=1, sort_keys=True) + "\n"
