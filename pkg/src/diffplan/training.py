"""Forward masking corruption and the SGD fine-tuning loop for the mask predictor."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .codec import FixedPatternTemplate, TokenSequence
from .model import MaskPredictor, save_checkpoint

GRAD_CLIP_NORM = 1.0  # fixed by design; bounds the 1/t loss-weight spikes


class ConfigError(ValueError):
    """Invalid training hyperparameters or an unusable dataset."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    batch_size: int = 32
    learning_rate: float = 0.15
    seed: int = 0
    t_min: float = 0.01

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 < self.t_min <= 0.1:
            raise ConfigError("t_min must lie in (0, 0.1]")


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    checkpoint_path: str | None = None


def sample_noise_level(rng: np.random.Generator, t_min: float) -> float:
    """Uniform draw on (0, 1), clamped below at t_min."""
    return max(float(rng.random()), t_min)


def apply_forward_masking(
    targets: TokenSequence,
    tpl: FixedPatternTemplate,
    t: float,
    rng: np.random.Generator,
) -> TokenSequence:
    """Independently mask each free position with probability t; frozen slots untouched."""
    if not 0 < t <= 1:
        raise ValueError("t must lie in (0, 1]")
    if targets.masked.any():
        raise ValueError("targets must be fully unmasked")
    out = targets.copy()
    free = np.fromiter(tpl.free_positions, dtype=np.int64)
    hit = free[rng.random(free.size) < t]
    out.ids[hit] = tpl.vocab.mask_id
    out.masked[hit] = True
    return out


def _corrupt(targets, tpl, rng, t_min):
    # resample t until at least one position is masked, keeping batch size constant
    while True:
        t = sample_noise_level(rng, t_min)
        corrupted = apply_forward_masking(targets, tpl, t, rng)
        if corrupted.masked.any():
            return corrupted, t


def clip_gradients(model: MaskPredictor, max_norm: float = GRAD_CLIP_NORM) -> float:
    grads = model.gradients()
    total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def sgd_update(model: MaskPredictor, learning_rate: float) -> None:
    grads = model.gradients()
    for name, p in model.parameters().items():
        p -= (learning_rate * grads[name]).astype(p.dtype)


def train_step(
    model: MaskPredictor,
    batch: list,
    tpl: FixedPatternTemplate,
    rng: np.random.Generator,
    learning_rate: float,
    t_min: float = 0.01,
) -> float:
    """One optimizer update on a batch of (sample, target sequence) pairs."""
    if not batch:
        raise ConfigError("batch must be nonempty")
    dtype = model.config.np_dtype
    rasters = np.stack([np.asarray(s.raster, dtype=dtype) for s, _ in batch])
    ctx = np.stack([np.asarray(s.instruction, dtype=np.int64) for s, _ in batch])
    target_ids = np.stack([tgt.ids for _, tgt in batch])

    resp_ids = np.empty_like(target_ids)
    mask = np.empty(target_ids.shape, dtype=bool)
    ts = np.empty(len(batch))
    for i, (_, tgt) in enumerate(batch):
        corrupted, ts[i] = _corrupt(tgt, tpl, rng, t_min)
        resp_ids[i] = corrupted.ids
        mask[i] = corrupted.masked

    per_sample = model.train_batch(rasters, ctx, resp_ids, target_ids, mask, ts)
    clip_gradients(model)
    sgd_update(model, learning_rate)
    return float(per_sample.mean())


def train(
    model: MaskPredictor,
    dataset: list,
    config: TrainConfig,
    tpl: FixedPatternTemplate,
    checkpoint_path=None,
    log_path=None,
    checkpoint_extra: dict | None = None,
) -> TrainReport:
    """Epoch loop over the dataset; deterministic given config.seed."""
    config.validate()
    if not dataset:
        raise ConfigError("dataset must be nonempty")

    pairs = [(s, codec.encode(s.truth, tpl)) for s in dataset]
    rng = np.random.default_rng(config.seed)
    report = TrainReport()

    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = rng.permutation(len(pairs))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            chunk = [pairs[i] for i in order[lo : lo + config.batch_size]]
            losses.append(
                train_step(model, chunk, tpl, rng, config.learning_rate, config.t_min)
            )
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise ConfigError(f"loss diverged at epoch {epoch}")
        report.epoch_losses.append(mean_loss)
        report.epoch_seconds.append(time.perf_counter() - start)
        if log_path is not None:
            header = not _file_has_content(log_path)
            with open(log_path, "a") as fh:
                if header:
                    fh.write("epoch,mean_loss,seconds\n")
                fh.write(f"{epoch},{mean_loss:.6f},{report.epoch_seconds[-1]:.3f}\n")

    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, extra=checkpoint_extra)
        report.checkpoint_path = str(checkpoint_path)
    return report


def _file_has_content(path) -> bool:
    try:
        with open(path) as fh:
            return bool(fh.readline())
    except OSError:
        return False
