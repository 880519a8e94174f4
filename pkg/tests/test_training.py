import numpy as np
import pytest

from diffplan import codec, world
from diffplan.codec import build_template, encode, fresh_masked
from diffplan.model import MaskPredictor, ModelConfig
from diffplan.training import (
    ConfigError,
    TrainConfig,
    apply_forward_masking,
    sample_noise_level,
    train,
    train_step,
)

TPL = build_template(6, (2, 1))


def small_model(tpl=TPL, seed=0):
    cfg = ModelConfig(
        d_model=16, n_heads=2, n_blocks=1, d_ff=32,
        raster_size=world.RASTER_SIZE, raster_channels=world.RASTER_CHANNELS,
        patch_size=4, context_len=world.CONTEXT_LEN, response_len=tpl.length,
    )
    return MaskPredictor(cfg, seed=seed)


def target_for(seed=0, tpl=TPL):
    sample = world.generate_scene(seed)
    return sample, encode(sample.truth, tpl)


class TestApplyForwardMasking:
    def test_t_one_masks_every_free_position(self):
        _, target = target_for()
        out = apply_forward_masking(target, TPL, 1.0, np.random.default_rng(0))
        assert out.masked[list(TPL.free_positions)].all()
        for p, expected in zip(TPL.frozen_positions, TPL.frozen_ids):
            assert out.ids[p] == expected and not out.masked[p]

    def test_masked_positions_get_mask_token(self):
        _, target = target_for(1)
        out = apply_forward_masking(target, TPL, 0.5, np.random.default_rng(1))
        assert (out.ids[out.masked] == TPL.vocab.mask_id).all()
        kept = ~out.masked
        assert np.array_equal(out.ids[kept], target.ids[kept])

    def test_monte_carlo_rate(self):
        # Bernoulli oracle: 10,000 draws at t=0.3 over 48 free slots
        _, target = target_for(2)
        rng = np.random.default_rng(7)
        total = sum(
            apply_forward_masking(target, TPL, 0.3, rng).masked.sum() for _ in range(10_000)
        )
        rate = total / (10_000 * TPL.free_count)
        assert abs(rate - 0.3) < 0.01

    def test_clamped_noise_level_expectation(self):
        _, target = target_for(3)
        rng = np.random.default_rng(8)
        t = max(1e-9, 0.01)  # caller clamps to t_min before masking
        total = sum(
            apply_forward_masking(target, TPL, t, rng).masked.sum() for _ in range(20_000)
        )
        expected = t * TPL.free_count
        assert total / 20_000 == pytest.approx(expected, rel=0.25)

    def test_invalid_t_rejected(self):
        _, target = target_for(4)
        rng = np.random.default_rng(0)
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                apply_forward_masking(target, TPL, bad, rng)

    def test_requires_unmasked_targets(self):
        with pytest.raises(ValueError):
            apply_forward_masking(fresh_masked(TPL), TPL, 0.5, np.random.default_rng(0))


class TestSampleNoiseLevel:
    def test_clamped_below(self):
        rng = np.random.default_rng(0)
        draws = [sample_noise_level(rng, 0.01) for _ in range(2000)]
        assert min(draws) >= 0.01
        assert max(draws) <= 1.0


class TestTrainStep:
    def test_identical_rng_streams_give_identical_loss(self):
        model_a, model_b = small_model(seed=1), small_model(seed=1)
        pair = [target_for(5)]
        loss_a = train_step(model_a, pair, TPL, np.random.default_rng(42), 0.1)
        loss_b = train_step(model_b, pair, TPL, np.random.default_rng(42), 0.1)
        assert loss_a == loss_b

    def test_empty_batch_rejected(self):
        with pytest.raises(ConfigError):
            train_step(small_model(), [], TPL, np.random.default_rng(0), 0.1)

    def test_loss_halves_within_200_steps(self):
        # memorization smoke test on 50 samples with the default toy model
        tpl = TPL
        model = MaskPredictor(ModelConfig(response_len=tpl.length), seed=0)
        pairs = [target_for(s)[0:2] for s in range(50)]
        pairs = [(s, t) for s, t in pairs]
        rng = np.random.default_rng(1)
        losses = []
        for step in range(200):
            batch = [pairs[i] for i in rng.permutation(50)[:10]]
            losses.append(train_step(model, batch, tpl, rng, 0.15))
        assert np.isfinite(losses).all()
        assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])

    def test_t_one_loss_equals_plain_cross_entropy(self):
        model = small_model(seed=2)
        sample, target = target_for(6)
        corrupted = apply_forward_masking(target, TPL, 1.0, np.random.default_rng(0))
        from diffplan.model import ModelInput

        inp = ModelInput(sample.raster, sample.instruction, corrupted)
        loss, _ = model.loss_and_grad(inp, target, 1.0)
        probs = model.forward(inp)
        free = list(TPL.free_positions)
        plain = -np.log(probs[free, target.ids[free]]).sum()
        assert loss == pytest.approx(plain, rel=1e-6)


class TestTrain:
    def test_empty_dataset_rejected(self):
        with pytest.raises(ConfigError):
            train(small_model(), [], TrainConfig(), TPL)

    def test_invalid_hyperparameters_rejected(self):
        data = [world.generate_scene(0)]
        for bad in (
            TrainConfig(epochs=0),
            TrainConfig(learning_rate=0.0),
            TrainConfig(t_min=0.5),
            TrainConfig(batch_size=0),
        ):
            with pytest.raises(ConfigError):
                train(small_model(), data, bad, TPL)

    def test_seeded_runs_reproduce_checkpoints_bitwise(self, tmp_path):
        data = [world.generate_scene(s) for s in range(20)]
        cfg = TrainConfig(epochs=1, batch_size=10, learning_rate=0.1, seed=9)
        paths = []
        for run in ("a", "b"):
            model = small_model(seed=3)
            train(model, data, cfg, TPL, checkpoint_path=tmp_path / f"{run}.npz")
            paths.append(tmp_path / f"{run}.npz")
        with np.load(paths[0]) as da, np.load(paths[1]) as db:
            for key in da.files:
                assert np.array_equal(da[key], db[key])

    def test_report_and_log(self, tmp_path):
        data = [world.generate_scene(s) for s in range(12)]
        log = tmp_path / "train.csv"
        report = train(
            small_model(seed=4), data,
            TrainConfig(epochs=2, batch_size=6, learning_rate=0.1, seed=0),
            TPL, checkpoint_path=tmp_path / "m.npz", log_path=log,
        )
        assert len(report.epoch_losses) == 2
        assert all(np.isfinite(l) for l in report.epoch_losses)
        assert report.checkpoint_path
        lines = log.read_text().splitlines()
        assert lines[0] == "epoch,mean_loss,seconds"
        assert len(lines) == 3
