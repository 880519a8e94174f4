"""Shared fixtures; trained models are cached under tests/_cache between runs."""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from diffplan import codec, world
from diffplan.codec import build_template, degenerate_template
from diffplan.model import MaskPredictor, ModelConfig, load_checkpoint, save_checkpoint
from diffplan.training import TrainConfig, train

CACHE_DIR = Path(__file__).parent / "_cache"
CACHE_VERSION = "v1"

DRIVING_TRAIN_SEEDS = range(0, 5000)
DRIVING_HELDOUT_SEEDS = range(100_000, 100_200)
PARKING_TRAIN_SEEDS = range(0, 4000)
PARKING_HELDOUT_SEEDS = range(200_000, 200_300)

DRIVING_TRAIN = TrainConfig(epochs=6, batch_size=32, learning_rate=0.15, seed=0)
PARKING_TRAIN = TrainConfig(epochs=8, batch_size=32, learning_rate=0.15, seed=0)
MEMORIZE_TRAIN = TrainConfig(epochs=600, batch_size=16, learning_rate=0.25, seed=0)
MEMORIZE_COUNT = 16


def _train_cached(key: str, build):
    """Train once per cache key; later runs reload the checkpoint."""
    CACHE_DIR.mkdir(exist_ok=True)
    ckpt = CACHE_DIR / f"{key}_{CACHE_VERSION}.npz"
    meta_path = CACHE_DIR / f"{key}_{CACHE_VERSION}.json"
    if ckpt.exists() and meta_path.exists():
        model, _ = load_checkpoint(ckpt)
        return model, json.loads(meta_path.read_text())
    model, meta = build()
    save_checkpoint(model, ckpt)
    meta_path.write_text(json.dumps(meta))
    return model, meta


@pytest.fixture(scope="session")
def default_template():
    return build_template(6, (2, 1))


@pytest.fixture(scope="session")
def parking_template():
    return build_template(1, (2, 1))


@pytest.fixture(scope="session")
def heldout_driving():
    return [world.generate_scene(s) for s in DRIVING_HELDOUT_SEEDS]


@pytest.fixture(scope="session")
def heldout_parking():
    return [world.generate_parking(s) for s in PARKING_HELDOUT_SEEDS]


@pytest.fixture(scope="session")
def trained_driving(default_template):
    tpl = default_template

    def build():
        dataset = [world.generate_scene(s) for s in DRIVING_TRAIN_SEEDS]
        model = MaskPredictor(ModelConfig(response_len=tpl.length), seed=0)
        t0 = time.perf_counter()
        report = train(model, dataset, DRIVING_TRAIN, tpl)
        return model, {
            "train_seconds": time.perf_counter() - t0,
            "epoch_losses": report.epoch_losses,
        }

    model, meta = _train_cached("driving_fp_on", build)
    return model, tpl, meta


@pytest.fixture(scope="session")
def trained_fpoff(default_template):
    tpl = degenerate_template(default_template)

    def build():
        dataset = [world.generate_scene(s) for s in DRIVING_TRAIN_SEEDS]
        model = MaskPredictor(ModelConfig(response_len=tpl.length), seed=0)
        t0 = time.perf_counter()
        report = train(model, dataset, DRIVING_TRAIN, tpl)
        return model, {
            "train_seconds": time.perf_counter() - t0,
            "epoch_losses": report.epoch_losses,
        }

    model, meta = _train_cached("driving_fp_off", build)
    return model, tpl, meta


@pytest.fixture(scope="session")
def trained_parking(parking_template):
    tpl = parking_template

    def build():
        dataset = [world.generate_parking(s) for s in PARKING_TRAIN_SEEDS]
        model = MaskPredictor(ModelConfig(response_len=tpl.length), seed=0)
        t0 = time.perf_counter()
        report = train(model, dataset, PARKING_TRAIN, tpl)
        return model, {
            "train_seconds": time.perf_counter() - t0,
            "epoch_losses": report.epoch_losses,
        }

    model, meta = _train_cached("parking", build)
    return model, tpl, meta


@pytest.fixture(scope="session")
def memorized(default_template):
    """A model overfit on a tiny fixed set, for exactness-style checks."""
    tpl = default_template
    samples = [world.generate_scene(s) for s in range(MEMORIZE_COUNT)]

    def build():
        model = MaskPredictor(ModelConfig(response_len=tpl.length), seed=0)
        report = train(model, samples, MEMORIZE_TRAIN, tpl)
        return model, {"epoch_losses": report.epoch_losses[-5:]}

    model, _ = _train_cached("memorized", build)
    return model, tpl, samples
