"""RePaint-style outpainting of the pattern region, in pixel or latent space."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .diffusion import (
    Denoiser,
    NoiseSchedule,
    NoiseSource,
    ancestral_step,
    call_denoiser,
    from_model_space,
    to_model_space,
)
from .errors import ConfigurationError, DimensionError, DomainError, ModelError
from .imgdata import stable_hash


class Autoencoder(Protocol):
    """Maps model-space images (N, C, H, W) to latents and back."""

    latent_shape: tuple[int, ...]
    tolerance: float

    def encode(self, x: np.ndarray) -> np.ndarray: ...

    def decode(self, z: np.ndarray) -> np.ndarray: ...


class IdentityAutoencoder:
    tolerance = 0.0

    def __init__(self, image_shape):
        self.latent_shape = tuple(image_shape)

    def encode(self, x):
        return x

    def decode(self, z):
        return z


class PoolAutoencoder:
    """Toy lossy autoencoder: ``factor x factor`` average pooling / nearest upsampling.

    ``tolerance`` is the reconstruction error bound in ``[0, 1]`` pixel units
    and must be measured on the data it is used with (see ``measure_tolerance``).
    """

    def __init__(self, image_shape, factor: int = 2, tolerance: float = 1.0):
        c, h, w = image_shape
        if h % factor or w % factor:
            raise DimensionError(f"{h}x{w} not divisible by pooling factor {factor}")
        self.factor = factor
        self.latent_shape = (c, h // factor, w // factor)
        self.tolerance = tolerance

    def encode(self, x):
        n, c, h, w = x.shape
        f = self.factor
        return x.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))

    def decode(self, z):
        return np.repeat(np.repeat(z, self.factor, axis=2), self.factor, axis=3)

    def measure_tolerance(self, images: np.ndarray) -> float:
        x = to_model_space(images)
        self.tolerance = float(np.max(np.abs(self.decode(self.encode(x)) - x)) / 2.0)
        return self.tolerance


@dataclass(frozen=True)
class OutpaintConfig:
    remask_period: int = 10
    steps: int | None = None  # None: every timestep of the schedule
    seed: int = 0
    terminal_remask: bool = True
    # Reproduce the known-region noising exactly as printed in the LDM
    # pseudocode: sqrt(abar_t) x0 + (1 - abar_t) eps, indexed at t.
    literal_known_noise: bool = False

    def __post_init__(self):
        if self.remask_period < 1:
            raise ConfigurationError(f"remask period must be >= 1, got {self.remask_period}")
        if self.steps is not None and self.steps < 1:
            raise ConfigurationError(f"sampling steps must be >= 1, got {self.steps}")


def _batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise DimensionError(f"expected (C, H, W) or (N, C, H, W), got {x.shape}")
    return x, False


def _mask(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 2:
        if m.shape != x.shape[-2:]:
            raise DimensionError(f"mask {m.shape} does not match image {x.shape[-2:]}")
        return m[None, None]
    if m.ndim == 3 and m.shape == (x.shape[0],) + x.shape[-2:]:
        return m[:, None]
    if m.shape == x.shape:
        return m
    raise DimensionError(f"mask {m.shape} does not match images {x.shape}")


def _seeds(config: OutpaintConfig, n: int, seeds: Sequence[int] | None) -> list[int]:
    if seeds is not None:
        if len(seeds) != n:
            raise DimensionError(f"{len(seeds)} seeds for {n} images")
        return [int(s) for s in seeds]
    return [stable_hash("outpaint", config.seed, i) for i in range(n)]


def _cond(c, n):
    if c is None:
        return None
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    if c.shape[0] == 1 and n > 1:
        c = np.repeat(c, n, axis=0)
    if c.shape[0] != n:
        raise DimensionError(f"{c.shape[0]} condition vectors for {n} images")
    return c


def _repaint(model: Denoiser, x: np.ndarray, c, m: np.ndarray, schedule: NoiseSchedule,
             config: OutpaintConfig, encode, decode, latent_shape, seeds, period: int) -> np.ndarray:
    xb, single = _batch(x)
    mb = _mask(m, xb)
    n = xb.shape[0]
    cond = _cond(c, n)
    x0 = to_model_space(xb)
    noise = NoiseSource(_seeds(config, n, seeds))
    ts = schedule.strided(config.steps)
    k = len(ts)
    z = noise.normal(latent_shape)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < k else 0
        eps = call_denoiser(model, z, t, cond)
        z = ancestral_step(z, eps, t, t_prev, schedule, noise.normal(latent_shape) if t_prev else None)
        # position counted down to 1 at the final step, so the full schedule remasks at t % s == 0
        if (k - i) % period == 0:
            e = noise.normal(x0.shape[1:])
            if config.literal_known_noise:
                ab = schedule.alpha_bar(t)
                known = math.sqrt(ab) * x0 + (1.0 - ab) * e
            else:
                ab = schedule.alpha_bar(t_prev)
                known = math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * e
            z = encode(mb * decode(z) + (1.0 - mb) * known)
            if not np.all(np.isfinite(z)):
                raise ModelError(f"autoencoder produced non-finite latents at t={t}")
    out = decode(z)
    if config.terminal_remask:
        out = decode(encode(mb * out + (1.0 - mb) * x0))
    if not np.all(np.isfinite(out)):
        raise ModelError("outpainting produced non-finite pixels")
    out = from_model_space(out)
    return out[0] if single else out


def outpaint_pixel(model: Denoiser, x: np.ndarray, c, m: np.ndarray, schedule: NoiseSchedule,
                   config: OutpaintConfig = OutpaintConfig(), seeds: Sequence[int] | None = None) -> np.ndarray:
    """Generate the ``m == 1`` region of ``x`` (pixel space, remask every step).

    ``x`` is one image (C, H, W) or a batch; ``seeds`` optionally gives one
    noise seed per image, otherwise seeds derive from ``config.seed``.
    """
    xb, _ = _batch(x)
    ident = IdentityAutoencoder(xb.shape[1:])
    return _repaint(model, x, c, m, schedule, config, ident.encode, ident.decode,
                    ident.latent_shape, seeds, period=1)


def outpaint_latent(model: Denoiser, autoencoder: Autoencoder, x: np.ndarray, c, m: np.ndarray,
                    schedule: NoiseSchedule, config: OutpaintConfig = OutpaintConfig(),
                    seeds: Sequence[int] | None = None) -> np.ndarray:
    """Latent-space outpainting: decode, remask and re-encode every ``remask_period`` steps."""
    if tuple(model.image_shape) != tuple(autoencoder.latent_shape):
        raise DimensionError(f"model dims {model.image_shape} differ from latent dims {autoencoder.latent_shape}")
    return _repaint(model, x, c, m, schedule, config, autoencoder.encode, autoencoder.decode,
                    autoencoder.latent_shape, seeds, period=config.remask_period)


def predicted_key(outpainted: np.ndarray, m: np.ndarray, color_mode: str = "grayscale") -> np.ndarray:
    """Masked mean of the outpainted pattern region.

    Returns shape ``(N,)`` for grayscale or ``(N, 3)`` for rgb (no leading
    axis for a single image).
    """
    from . import kernels

    xb, single = _batch(outpainted)
    m = np.asarray(m, dtype=np.float64)
    if m.shape != xb.shape[-2:]:
        raise DimensionError(f"mask {m.shape} does not match image {xb.shape[-2:]}")
    if not np.any(m):
        raise DomainError("empty mask has no predicted key")
    # shift by one masked pixel so a constant region averages to its value exactly
    y, x = np.argwhere(m)[0]
    ref = xb[:, :, y, x]
    per_channel = kernels.masked_channel_means(xb - ref[:, :, None, None], m)
    if color_mode == "grayscale":
        res = ref[:, 0] + (per_channel + (ref - ref[:, :1])).mean(axis=1)
    elif color_mode == "rgb":
        res = ref + per_channel
    else:
        raise ConfigurationError(f"unknown color mode {color_mode!r}")
    return res[0] if single else res
