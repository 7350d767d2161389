"""Tests for the conditional GAN generator, discriminator and training loop."""

import numpy as np
import pandas as pd
import pytest

import nn_substrate as nn
from cgan import (HISTORY_COLUMNS, DiscriminatorNet, GanTrainConfig, GeneratorNet, cgan_losses,
                  generate_normalized, history_to_csv, infer, infer_batch, l2_per_sample, load_generator,
                  save_generator, train_cgan)
from channel_sim import ArrayGeometry, ChannelKind, DatasetSpec, draw_multipath, expand_zero_rows, full_channel, \
    measurement_rng, sample_rng, simulate_measurement
from errors import NumericalError
from preprocess import build_gan_pair

GENERATOR_TRACE = [
    ("down1", (8, 1200, 32)), ("down2", (4, 600, 64)), ("down3", (2, 300, 64)), ("down4", (1, 150, 64)),
    ("down5", (1, 30, 64)), ("down6", (1, 6, 64)), ("down7", (1, 1, 128)),
    ("up8", (1, 6, 128)), ("up9", (1, 30, 64)), ("up10", (1, 150, 64)), ("up11", (2, 300, 65)),
    ("up12", (4, 600, 128)), ("up13", (8, 1200, 64)), ("up14", (8, 1200, 32)), ("head", (8, 1200, 2)),
]


def _pairs(count, seed=0):
    spec = DatasetSpec(num_samples=count, num_paths=3, rng_seed=seed)
    inputs, labels = [], []
    for i in range(count):
        H = full_channel(draw_multipath(spec, sample_rng(seed, i)), ArrayGeometry(8), 1200)
        _, H_c = simulate_measurement(H, 20.0, measurement_rng(seed, i))
        x, y = build_gan_pair(expand_zero_rows(H_c), H)
        inputs.append(x)
        labels.append(y)
    return inputs, labels


class TestArchitecture:
    def test_generator_shape_trace(self):
        trace = GeneratorNet().shape_trace((8, 1200, 2))
        assert trace == GENERATOR_TRACE

    def test_discriminator_shape_trace(self):
        trace = DiscriminatorNet().shape_trace((8, 1200, 4))
        assert trace[2] == ("conv2d", (8, 240, 128))
        assert ("zero_pad2d", (10, 10, 128)) in trace
        assert ("conv2d", (6, 6, 256)) in trace
        assert trace[-1] == ("conv2d", (4, 4, 1))

    def test_skip_ablation_changes_channel_counts(self):
        with_skips = GeneratorNet(GanTrainConfig())
        without = GeneratorNet(GanTrainConfig(use_skips=False))
        assert with_skips.parameters()["up9.0.weight"].shape == (5, 5, 192, 64)
        assert without.parameters()["up9.0.weight"].shape == (5, 5, 128, 64)
        assert without.shape_trace((8, 1200, 2))[-1] == ("head", (8, 1200, 2))

    def test_block11_width_is_configurable(self):
        trace = dict(GeneratorNet(GanTrainConfig(block11_filters=64)).shape_trace((8, 1200, 2)))
        assert trace["up11"] == (2, 300, 64)

    def test_input_must_follow_stride_chain(self):
        with pytest.raises(ValueError, match="stride chain"):
            GeneratorNet().check_input_shape((8, 1000, 2))
        GeneratorNet().check_input_shape((8, 1200, 2))

    def test_forward_is_bounded(self):
        inputs, labels = _pairs(2)
        X = np.stack([x.data for x in inputs]).astype(np.float32)
        generator = GeneratorNet()
        out = generate_normalized(generator, X)
        assert out.shape == X.shape
        assert np.all(np.abs(out) <= 1.0)
        d_out = DiscriminatorNet()(nn.Tensor(X), nn.Tensor(out))
        assert d_out.shape == (2, 4, 4, 1)

    def test_discriminator_frozen_stats(self):
        inputs, labels = _pairs(2)
        X = nn.Tensor(np.stack([x.data for x in inputs]).astype(np.float32))
        Y = nn.Tensor(np.stack([y.data for y in labels]).astype(np.float32))
        discriminator = DiscriminatorNet()
        before = {k: v.copy() for k, v in discriminator.buffers().items()}
        with discriminator.frozen_stats():
            discriminator(X, Y, training=True)
        for name, values in discriminator.buffers().items():
            np.testing.assert_array_equal(values, before[name])
        discriminator(X, Y, training=True)
        assert any(not np.array_equal(v, before[k]) for k, v in discriminator.buffers().items())

    def test_discriminator_rejects_misaligned_pair(self):
        with pytest.raises(ValueError, match="do not align"):
            DiscriminatorNet()(nn.Tensor(np.zeros((1, 8, 1200, 2))), nn.Tensor(np.zeros((1, 8, 600, 2))))

    def test_inference_dropout_switch(self):
        generator = GeneratorNet(GanTrainConfig(inference_dropout=True))
        flags = [layer.active_at_inference for block in generator.up for layer in block.layers
                 if isinstance(layer, nn.DropoutLayer)]
        assert flags == [True, True, True]
        generator.set_inference_dropout(False)
        assert not any(layer.active_at_inference for block in generator.up for layer in block.layers
                       if isinstance(layer, nn.DropoutLayer))


class TestLosses:
    def _zero_logits(self):
        zeros = nn.Tensor(np.zeros((2, 4, 4, 1)))
        label = nn.Tensor(np.ones((2, 3, 5, 2)))
        return zeros, label

    def test_values_at_zero_logits(self):
        zeros, label = self._zero_logits()
        losses = cgan_losses(zeros, zeros, label, label, beta=100.0)
        assert float(losses.loss_d.values) == pytest.approx(2 * np.log(2))
        assert float(losses.adversarial.values) == pytest.approx(np.log(2))
        assert float(losses.l2_term.values) == pytest.approx(0.0)
        assert float(losses.loss_g.values) == pytest.approx(np.log(2))

    def test_minimax_generator_loss(self):
        zeros, label = self._zero_logits()
        losses = cgan_losses(zeros, zeros, label, label, generator_loss="minimax")
        assert float(losses.adversarial.values) == pytest.approx(-np.log(2))

    def test_l2_term_is_per_sample_norm(self):
        g = nn.Tensor(np.zeros((2, 1, 2, 2)))
        label = nn.Tensor(np.stack([np.full((1, 2, 2), 1.0), np.full((1, 2, 2), 2.0)]))
        np.testing.assert_allclose(l2_per_sample(g, label).values, [2.0, 4.0])
        zeros = nn.Tensor(np.zeros((2, 4, 4, 1)))
        losses = cgan_losses(zeros, zeros, g, label, beta=10.0)
        assert float(losses.loss_g.values) == pytest.approx(np.log(2) + 10.0 * 3.0)

    def test_non_finite_input_raises(self):
        zeros, label = self._zero_logits()
        bad = nn.Tensor(np.full((2, 4, 4, 1), np.nan))
        with pytest.raises(NumericalError, match="d_real"):
            cgan_losses(bad, zeros, label, label)

    def test_unknown_generator_loss(self):
        zeros, label = self._zero_logits()
        with pytest.raises(ValueError, match="unknown generator loss"):
            cgan_losses(zeros, zeros, label, label, generator_loss="wasserstein")


class TestConfig:
    def test_defaults_are_valid(self):
        assert GanTrainConfig().validate() == []

    def test_issues(self):
        issues = GanTrainConfig(batch_size=1, generator_loss="x", dropout_rate=1.0).validate()
        assert any("batch_size" in i for i in issues)
        assert any("generator_loss" in i for i in issues)
        assert any("dropout_rate" in i for i in issues)

    def test_training_rejects_invalid_config(self):
        with pytest.raises(ValueError, match="invalid cGAN config"):
            train_cgan([], [], GanTrainConfig(lr=0.0))


class TestTraining:
    def test_one_epoch(self, tmp_path):
        inputs, labels = _pairs(2)
        cfg = GanTrainConfig(epochs=1, batch_size=2, checkpoint_every=1)
        trained = train_cgan(inputs, labels, cfg, val_inputs=inputs, val_labels=labels,
                             checkpoint_dir=tmp_path)
        history = trained.history
        assert list(history.columns) == HISTORY_COLUMNS
        assert history["epoch"].tolist() == [0, 1]
        assert np.isnan(history.loc[0, "loss_D"])
        assert np.all(np.isfinite(history.loc[1, ["loss_D", "loss_G", "l2_term", "val_nse"]].astype(float)))
        assert (tmp_path / "generator_epoch001.mrce").exists()

        path = history_to_csv(history, tmp_path / "cgan_history.csv")
        assert pd.read_csv(path)["epoch"].tolist() == [0, 1]

    def test_needs_two_samples(self):
        inputs, labels = _pairs(1)
        with pytest.raises(ValueError, match="at least 2 samples"):
            train_cgan(inputs, labels, GanTrainConfig(epochs=1, batch_size=2))

    def test_save_and_load(self, tmp_path):
        generator = GeneratorNet(GanTrainConfig(seed=3))
        generator.down[1].layers[1].running_mean[:] = 0.5
        path = tmp_path / "generator.mrce"
        save_generator(path, generator)
        loaded = load_generator(path, GanTrainConfig(seed=4))
        for name, p in generator.parameters().items():
            np.testing.assert_array_equal(loaded.parameters()[name].values, p.values)
        np.testing.assert_array_equal(loaded.buffers()["down2.1.running_mean"], 0.5)

    def test_infer_returns_generated_channel(self):
        spec = DatasetSpec(num_samples=1, num_paths=3)
        H = full_channel(draw_multipath(spec, sample_rng(0, 0)), ArrayGeometry(8), 1200)
        _, H_c = simulate_measurement(H, 20.0, measurement_rng(0, 0))
        H_ce = expand_zero_rows(H_c)
        generator = GeneratorNet()
        out = infer(generator, H_ce)
        assert out.kind == ChannelKind.GENERATED
        assert out.shape == (8, 1200)
        batch = infer_batch(generator, [H_ce, H_ce])
        np.testing.assert_allclose(batch[0].entries, out.entries, rtol=1e-4, atol=1e-6)
        assert infer_batch(generator, []) == []
