from __future__ import annotations

import time

import numpy as np
import pytest

from solidmark import diffusion as dif
from solidmark import experiments as exp
from solidmark import imgdata as img
from solidmark.memorization import EvalConfig
from solidmark.outpaint import OutpaintConfig

# Desk fixture shared by the acceptance suite and slow tests.
DESK_COUNT = 300
DESK_SIZE = 32
DESK_THICKNESS = 4
DESK_LEVELS = (1, 4, 16)
DESK_TRAIN = dict(epochs=60, channels=32, seed=0, lr=2e-3, batch_size=64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    ds = img.gen_synthetic_dataset(12, 8, 3, seed=5)
    return ds.replace(keymap=img.assign_keys(ds, 6))


@pytest.fixture(scope="session")
def tiny_model():
    """A few epochs on 8x8 images with p=2: cheap, untrained-ish, real torch path."""
    ds = img.gen_synthetic_dataset(16, 8, 2, seed=2)
    ds = ds.replace(keymap=img.assign_keys(ds, 3))
    spec = img.PatternSpec("border", 2)
    x = img.training_images(ds, spec)
    state = dif.new_state(dif.TrainConfig(epochs=2, channels=8, batch_size=16, seed=0, T=50), x.shape[1:])
    dif.train(state, x, [it.caption for it in ds.items])
    return state, ds, spec


class DeskRun:
    """Trains the duplication fixture once and keeps everything the checks need."""

    def __init__(self):
        t0 = time.time()
        base = img.gen_synthetic_dataset(DESK_COUNT, DESK_SIZE, 3, seed=0)
        base = base.replace(keymap=img.assign_keys(base, 11))
        self.base = base
        self.spec = img.PatternSpec("border", DESK_THICKNESS)
        self.eval_config = EvalConfig(seed=0, pattern=self.spec, outpaint=OutpaintConfig(steps=50, seed=0))
        self.state = None

        def trainer(ds, spec):
            x = img.training_images(ds, spec)
            self.state = dif.new_state(dif.TrainConfig(**DESK_TRAIN), x.shape[1:])
            dif.train(self.state, x, [it.caption for it in ds.items])
            self.dataset = ds
            return self.state.denoiser(), self.state.schedule

        self.duplication = exp.run_duplication_study(base, DESK_LEVELS, trainer, self.eval_config)
        self.seconds = time.time() - t0

    def model(self):
        return self.state.denoiser(), self.state.schedule


@pytest.fixture(scope="session")
def desk():
    return DeskRun()
