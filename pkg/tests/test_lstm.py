"""Tests for the phase-refining LSTM."""

import math

import numpy as np
import pytest

import nn_substrate as nn
from lstm import (HISTORY_COLUMNS, LstmLayerParams, LstmTrainConfig, PhaseNet, build_phase_net, evaluate_loss,
                  load_phase_net, lstm_cell_step, lstm_layer_forward, phase_loss, refine_phase, refine_sequences,
                  save_phase_net, train_phase_net)


def _layer(rng, units=3, features=2, activation="tanh", candidate=None):
    return LstmLayerParams.initialize(units, features, rng, std=0.5, activation=activation,
                                      candidate=candidate, dtype=np.float64)


class TestStructure:
    def test_parameter_count(self):
        net = build_phase_net(seed=0)
        assert net.num_params == 568
        assert sum(p.values.size for p in net.parameters().values()) == 568

    def test_layer_shapes_validated(self):
        W = nn.Tensor(np.zeros((8, 2)))
        with pytest.raises(ValueError, match="inconsistent"):
            LstmLayerParams(W, nn.Tensor(np.zeros((8, 3))), nn.Tensor(np.zeros(8)))

    def test_feature_mismatch(self, rng):
        with pytest.raises(ValueError, match="expects 2 features"):
            lstm_layer_forward(np.zeros((1, 4, 3)), _layer(rng))

    def test_config_validation(self):
        assert LstmTrainConfig().validate() == []
        issues = LstmTrainConfig(loss="l1", units=(10,), truncation=-1).validate()
        assert any("loss" in i for i in issues)
        assert any("units" in i for i in issues)
        assert any("truncation" in i for i in issues)


class TestForward:
    def test_layer_matches_cell_steps(self, rng):
        params = _layer(rng)
        x = rng.standard_normal((2, 5, 2))
        out = lstm_layer_forward(x, params).values
        h = c = np.zeros((2, 3))
        for t in range(5):
            h, c = lstm_cell_step(x[:, t], h, c, params)
            np.testing.assert_allclose(out[:, t], h, rtol=1e-12, atol=1e-14)

    def test_scalar_oracle(self):
        W = nn.Tensor(np.array([[0.3], [-0.2], [0.5], [0.1]]))
        R = nn.Tensor(np.array([[0.4], [0.25], [-0.3], [0.2]]))
        b = nn.Tensor(np.array([0.05, 0.1, -0.05, 0.0]))
        params = LstmLayerParams(W, R, b, activation="tanh")
        xs = [0.7, -1.1, 0.4]

        def sig(v):
            return 1.0 / (1.0 + math.exp(-v))

        h = c = 0.0
        expected = []
        for x in xs:
            z = [W.values[k, 0] * x + R.values[k, 0] * h + b.values[k] for k in range(4)]
            c = sig(z[1]) * c + sig(z[0]) * math.tanh(z[2])
            h = sig(z[3]) * math.tanh(c)
            expected.append(h)
        out = lstm_layer_forward(np.array(xs).reshape(3, 1), params).values
        np.testing.assert_allclose(out.ravel(), expected, rtol=1e-12)

    def test_linear_layer_and_sigmoid_candidate(self, rng):
        x = rng.standard_normal((1, 4, 2))
        linear = _layer(np.random.default_rng(0), activation="linear")
        literal = _layer(np.random.default_rng(0), activation="linear", candidate="sigmoid")
        assert literal.candidate_activation == "sigmoid"
        assert not np.allclose(lstm_layer_forward(x, linear).values, lstm_layer_forward(x, literal).values)

    def test_sigmoid_candidate_config(self):
        net = PhaseNet(LstmTrainConfig(candidate_activation="sigmoid"))
        assert [layer.candidate_activation for layer in net.layers] == ["sigmoid", "sigmoid"]
        default = PhaseNet(LstmTrainConfig())
        assert [layer.candidate_activation for layer in default.layers] == ["tanh", "linear"]

    def test_truncation_keeps_forward_values(self, rng):
        params = _layer(rng)
        x = rng.standard_normal((2, 7, 2))
        full = lstm_layer_forward(x, params).values
        chunked = lstm_layer_forward(x, params, truncation=3).values
        np.testing.assert_allclose(chunked, full, rtol=1e-12)

    def test_last_step_only(self, rng):
        params = _layer(rng)
        x = rng.standard_normal((2, 4, 2))
        last = lstm_layer_forward(x, params, return_sequences=False).values
        np.testing.assert_allclose(last, lstm_layer_forward(x, params).values[:, -1])


class TestGradients:
    def test_five_step_network(self, rng, gradcheck):
        net = PhaseNet(LstmTrainConfig(init_std=0.5), rng=rng, dtype=np.float64)
        x = nn.Tensor(rng.standard_normal((2, 5, 2)), requires_grad=True)
        labels = rng.standard_normal((2, 5))
        tensors = list(net.parameters().values()) + [x]
        assert gradcheck(lambda: phase_loss(net(x), labels), tensors) < 1e-4

    def test_circular_loss_gradient(self, rng, gradcheck):
        net = PhaseNet(LstmTrainConfig(), rng=rng, dtype=np.float64)
        x = rng.standard_normal((1, 5, 2))
        labels = rng.standard_normal((1, 5))
        assert gradcheck(lambda: phase_loss(net(x), labels, "circular"), list(net.parameters().values())) < 1e-4

    def test_truncation_stops_gradient(self, rng):
        params = _layer(rng)
        x = nn.Tensor(rng.standard_normal((1, 4, 2)), requires_grad=True)
        out = lstm_layer_forward(x, params, truncation=2)
        nn.tsum(out[:, -1]).backward()
        assert not np.any(x.grad[:, :2])
        assert np.any(x.grad[:, 2:])


class TestLoss:
    def test_circular_loss_ignores_wrapping(self):
        pred = nn.Tensor(np.array([[0.5, -3.0]]))
        wrapped = np.array([[0.5 + 2 * np.pi, -3.0 - 2 * np.pi]])
        assert float(phase_loss(pred, wrapped, "circular").values) == pytest.approx(0.0, abs=1e-12)
        assert float(phase_loss(pred, wrapped, "mse").values) == pytest.approx(4 * np.pi ** 2)

    def test_unknown_loss(self):
        with pytest.raises(ValueError, match="unknown loss"):
            phase_loss(nn.Tensor(np.zeros(2)), np.zeros(2), "huber")


class TestTraining:
    def test_passthrough_task_improves(self, rng):
        phases = rng.uniform(-np.pi, np.pi, (16, 10))
        inputs = np.stack([phases, rng.uniform(-np.pi, np.pi, (16, 10))], axis=-1)
        cfg = LstmTrainConfig(epochs=200, lr=2e-2, batch_size=16, seed=2)
        trained = train_phase_net(inputs, phases, cfg)
        history = trained.history
        assert list(history.columns) == HISTORY_COLUMNS
        assert history["epoch"].tolist() == list(range(201))
        assert history["train_loss"].iloc[-1] < 0.5 * history["train_loss"].iloc[0]
        assert evaluate_loss(trained.net, inputs, phases) == pytest.approx(
            phase_loss(trained.net(inputs.astype(np.float32), truncation=0), phases).values.item(), rel=1e-5)

    def test_validation_history(self, rng):
        inputs = rng.uniform(-np.pi, np.pi, (4, 6, 2))
        labels = inputs[..., 0]
        trained = train_phase_net(inputs, labels, LstmTrainConfig(epochs=2, truncation=3),
                                  val_inputs=inputs, val_labels=labels)
        assert np.all(np.isfinite(trained.history["val_loss"]))

    def test_shape_errors(self):
        with pytest.raises(ValueError, match="expected inputs"):
            train_phase_net(np.zeros((4, 6, 2)), np.zeros((4, 5)), LstmTrainConfig(epochs=1))
        with pytest.raises(ValueError, match="invalid LSTM config"):
            train_phase_net(np.zeros((4, 6, 2)), np.zeros((4, 6)), LstmTrainConfig(lr=-1.0))


class TestInference:
    def test_refine_phase_shapes(self, rng):
        net = build_phase_net(seed=1)
        I1, I2 = rng.uniform(-np.pi, np.pi, (2, 256))
        single = refine_phase(net, I1, I2)
        assert single.shape == (256,)
        assert single.dtype == np.float64
        batched = refine_phase(net, np.stack([I1, I1]), np.stack([I2, I2]))
        assert batched.shape == (2, 256)
        np.testing.assert_allclose(batched[0], single, rtol=1e-5, atol=1e-6)
        with pytest.raises(ValueError, match="input shapes differ"):
            refine_phase(net, I1, I2[:10])

    def test_refine_sequences_matches_refine_phase(self, rng):
        net = build_phase_net(seed=1)
        inputs = rng.uniform(-np.pi, np.pi, (3, 20, 2))
        out = refine_sequences(net, inputs, batch_size=2)
        assert out.shape == (3, 20)
        np.testing.assert_allclose(out[2], refine_phase(net, inputs[2, :, 0], inputs[2, :, 1]),
                                   rtol=1e-5, atol=1e-6)

    def test_save_and_load(self, tmp_path, rng):
        net = build_phase_net(seed=5)
        path = tmp_path / "phase_net.mrce"
        save_phase_net(path, net)
        loaded = load_phase_net(path)
        x = rng.uniform(-np.pi, np.pi, (2, 8, 2))
        np.testing.assert_array_equal(refine_sequences(loaded, x), refine_sequences(net, x))
