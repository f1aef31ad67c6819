from __future__ import annotations

import dataclasses

import mpmath
import numpy as np
import pytest

import oracles
from flowclass import cascade
from flowclass import nn_core as nn
from flowclass.cascade import CascadeConfig, DataError, TrainingDivergenceError


def perturbed_model(config, arch="cascade", seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    model = cascade.init_model(config, arch, rng)
    for k in model.params:
        model.params[k] = model.params[k] + rng.normal(0, scale, model.params[k].shape)
    return model


def toy_set(n=40, t=6, f=6):
    """Two classes with disjoint constant feature values."""
    X = np.empty((n, t, f))
    y = np.empty(n, dtype=np.int64)
    for i in range(n):
        y[i] = 1 + i % 2
        X[i] = 0.2 if y[i] == 1 else 0.8
    return X, y


def oracle_forward(model, x):
    """Class probabilities of one window via the per-layer oracles."""
    cfg = model.config
    seq = [list(row) for row in x]
    for layer in range(cfg.lstm_layers):
        cell = model.lstm_params(layer)
        W = {g + k: getattr(cell, f"W_{g}{k}") for g in nn.GATES for k in "xh"}
        b = {g: getattr(cell, f"b_{g}") for g in nn.GATES}
        h = [mpmath.mpf(0)] * cell.hidden_size
        s = [mpmath.mpf(0)] * cell.hidden_size
        out = []
        for step in seq:
            h, s = oracles.lstm_cell_mp(W, b, [float(v) for v in step], h, s)
            out.append(h)
        seq = out
    grid = [[float(seq[k][r]) for k in range(len(seq))] for r in range(len(seq[0]))]
    conv = oracles.conv2d_naive(grid, model.params["conv.W"], model.params["conv.b"])
    flat = oracles.maxpool_naive(conv).reshape(-1)
    Wd, bd = model.params["dense.W"], model.params["dense.b"]
    logits = [sum(Wd[c, j] * flat[j] for j in range(len(flat))) + bd[c] for c in range(len(bd))]
    return oracles.softmax_mp(logits)


# --------------------------------------------------------------------------- forward / inference

def test_forward_matches_composed_oracles():
    cfg = CascadeConfig(window=6, lstm_hidden=4, conv_filters=2, num_classes=3)
    model = perturbed_model(cfg)
    X = np.random.default_rng(1).random((5, 6, 6))
    got = cascade.forward(model, X)
    for i in range(len(X)):
        np.testing.assert_allclose(got[i], oracle_forward(model, X[i]), rtol=1e-10)


def test_zero_output_layer_gives_uniform_probabilities():
    cfg = CascadeConfig(num_classes=4)
    model = cascade.init_model(cfg)
    model.params["dense.W"][:] = 0
    np.testing.assert_array_equal(cascade.forward(model, np.zeros((1, 6, 6))), [[0.25] * 4])


def test_inference_is_repeatable():
    cfg = CascadeConfig(num_classes=4)
    model = perturbed_model(cfg)
    X = np.random.default_rng(2).random((20, 6, 6))
    assert np.array_equal(cascade.forward(model, X), cascade.forward(model, X))


def test_wrong_window_shape_rejected():
    model = cascade.init_model(CascadeConfig(num_classes=2))
    with pytest.raises(nn.ShapeError):
        cascade.forward(model, np.zeros((1, 5, 6)))


def test_argmax_examples():
    assert cascade.argmax_lowest(np.array([[0.1, 0.7, 0.1, 0.1]])).tolist() == [2]
    assert cascade.argmax_lowest(np.array([[0.5, 0.5]])).tolist() == [1]


def test_predict_equals_argmax_of_oracle_forward():
    cfg = CascadeConfig(window=4, lstm_hidden=3, conv_filters=2, num_classes=4)
    model = perturbed_model(cfg, scale=1.0)
    X = np.random.default_rng(3).random((12, 4, 6))
    want = [int(np.argmax(oracle_forward(model, x))) + 1 for x in X]
    assert cascade.predict(model, X).tolist() == want


@pytest.mark.parametrize("arch", ["cascade", "lstm", "cnn"])
def test_logit_shift_leaves_prediction_unchanged(arch):
    cfg = CascadeConfig(num_classes=4)
    model = perturbed_model(cfg, arch)
    X = np.random.default_rng(4).random((30, 6, 6))
    before = cascade.predict(model, X)
    model.params["dense.b"] += 3.7
    assert np.array_equal(cascade.predict(model, X), before)


# --------------------------------------------------------------------------- gradients

@pytest.mark.parametrize("arch", ["cascade", "lstm", "cnn"])
def test_gradients_match_finite_differences(arch):
    cfg = CascadeConfig(window=4, lstm_hidden=3, conv_filters=2, num_classes=4, keep_prob=1.0)
    model = perturbed_model(cfg, arch)
    rng = np.random.default_rng(5)
    X, y = rng.random((5, 4, 6)), rng.integers(1, 5, 5)
    _, grads, _ = cascade.loss_and_grads(model, X, y)
    eps = 1e-5
    for name, arr in model.params.items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up = cascade.loss_and_grads(model, X, y)[0]
            arr[idx] = old - eps
            down = cascade.loss_and_grads(model, X, y)[0]
            arr[idx] = old
            num, ana = (up - down) / (2 * eps), grads[name][idx]
            assert abs(num - ana) / max(abs(num), abs(ana), 1e-8) < 1e-4, (name, idx)


def test_doubling_lambda_doubles_l2_gradient_component():
    cfg = CascadeConfig(window=4, lstm_hidden=3, conv_filters=2, num_classes=4, keep_prob=1.0)
    model = perturbed_model(cfg)
    X, y = np.random.default_rng(6).random((4, 4, 6)), np.array([1, 2, 3, 4])
    grads = {}
    for lam in (0.0, 0.01, 0.02):
        model.config = dataclasses.replace(cfg, l2_lambda=lam)
        grads[lam] = cascade.loss_and_grads(model, X, y)[1]
    for name in model.weight_names():
        one = grads[0.01][name] - grads[0.0][name]
        two = grads[0.02][name] - grads[0.0][name]
        np.testing.assert_allclose(two, 2 * one, rtol=1e-9, atol=1e-15)
    for name in ("dense.b", "conv.b", "lstm1.b_f"):
        np.testing.assert_array_equal(grads[0.02][name], grads[0.0][name])


# --------------------------------------------------------------------------- training

def test_toy_set_is_learned():
    X, y = toy_set()
    model, trace = cascade.train((X, y), CascadeConfig(num_classes=2, epochs=50, early_stop_patience=0))
    assert np.mean(cascade.predict(model, X) == y) >= 0.95
    assert len(trace) == 50


def test_zero_epochs_returns_initial_model():
    X, y = toy_set()
    cfg = CascadeConfig(num_classes=2, epochs=0, seed=9)
    model, trace = cascade.train((X, y), cfg)
    assert trace == []
    fresh = cascade.init_model(cfg, rng=np.random.default_rng(9))
    for k in fresh.params:
        assert np.array_equal(model.params[k], fresh.params[k])


def test_training_is_deterministic():
    X, y = toy_set()
    cfg = CascadeConfig(num_classes=2, epochs=3, seed=4)
    a, ta = cascade.train((X, y), cfg)
    b, tb = cascade.train((X, y), cfg)
    assert ta == tb
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_label_out_of_range():
    X, y = toy_set()
    with pytest.raises(DataError):
        cascade.train((X, y + 5), CascadeConfig(num_classes=2, epochs=1))
    with pytest.raises(DataError):
        cascade.train((X, y - 1), CascadeConfig(num_classes=2, epochs=1))


def test_divergence_reports_epoch():
    X, y = toy_set()
    X = X * 1e6
    with pytest.raises(TrainingDivergenceError) as err:
        cascade.train((X, y), CascadeConfig(num_classes=2, epochs=5, learning_rate=1e12))
    assert 0 <= err.value.epoch < 5 and f"epoch {err.value.epoch}" in str(err.value)


def test_l2_shrinks_weights_on_noise_labels():
    rng = np.random.default_rng(7)
    X, y = rng.random((64, 6, 6)), rng.integers(1, 3, 64)
    norms = {}
    for lam in (0.0, 0.01):
        cfg = CascadeConfig(lstm_hidden=4, conv_filters=4, num_classes=2, epochs=30,
                            l2_lambda=lam, early_stop_patience=0, seed=1)
        model, _ = cascade.train((X, y), cfg)
        norms[lam] = np.mean([np.linalg.norm(model.params[w]) for w in model.weight_names()])
    assert norms[0.01] < norms[0.0]


def test_early_stop_on_flat_loss():
    X, y = toy_set()
    cfg = CascadeConfig(num_classes=2, epochs=200, early_stop_patience=3, early_stop_tol=10.0)
    model, trace = cascade.train((X, y), cfg)
    assert len(trace) == 4 and model.epochs_run == 4


# --------------------------------------------------------------------------- persistence and config

@pytest.mark.parametrize("arch", ["cascade", "lstm", "cnn"])
def test_save_load_round_trip(tmp_path, arch):
    cfg = CascadeConfig(num_classes=4, lstm_hidden=5, conv_filters=3)
    model = perturbed_model(cfg, arch)
    model.final_loss = 0.123456789
    path = tmp_path / "m.txt"
    cascade.save_model(model, path)
    back = cascade.load_model(path)
    assert back.config == model.config and back.arch == arch and back.final_loss == model.final_loss
    for k in model.params:
        assert np.array_equal(back.params[k], model.params[k])
    X = np.random.default_rng(8).random((1000, 6, 6))
    assert np.array_equal(cascade.predict(back, X), cascade.predict(model, X))


def test_config_file(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("# comment\nlstm_hidden = 8\nkernel = 2x2\nkeep_prob = 0.5\nnum_classes = 3\n")
    cfg = CascadeConfig.from_mapping(cascade.read_config_file(p))
    assert cfg.lstm_hidden == 8 and cfg.keep_prob == 0.5 and cfg.num_classes == 3
    assert cfg.learning_rate == 0.05 and cfg.l2_lambda == 0.01 and cfg.epochs == 100
    with pytest.raises(KeyError):
        CascadeConfig.from_mapping({"hidden": "3"})
    with pytest.raises(ValueError):
        CascadeConfig(keep_prob=0.0)
