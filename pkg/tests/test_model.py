import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advpatch.errors import ConfigError, InputError
from advpatch.model import (ArchSpec, ClassifierParams, ImageBatch, TrainConfig, build_model,
                            cross_entropy, forward, input_gradient, loss_and_param_grad,
                            param_gradient, per_example_loss, predict, predict_batch,
                            sgd_step, small_cnn)

from .oracles import fd_input_grad, fd_param_grad, grad_rel_error


def dense_arch(h=1, w=1, c=1, k=2):
    return ArchSpec(h, w, c, k, ({"type": "dense", "units": k},))


# --------------------------------------------------------------------------- build_model

def test_dense_only_shapes():
    p = build_model(ArchSpec(1, 1, 4, 3, ({"type": "dense", "units": 3},)), seed=7)
    assert p.tensors["layer0.weight"].shape == (4, 3)
    assert np.array_equal(p.tensors["layer0.bias"], np.zeros(3, np.float32))
    assert p.dtype == np.float32


def test_build_is_deterministic():
    a, b = build_model(small_cnn(), 3), build_model(small_cnn(), 3)
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)
    c = build_model(small_cnn(), 4)
    assert not np.array_equal(a.tensors["layer0.weight"], c.tensors["layer0.weight"])


def test_shape_chain_conv_pool_dense():
    arch = ArchSpec(16, 16, 3, 5, ({"type": "conv", "out_channels": 8, "padding": 1},
                                   {"type": "pool"}, {"type": "dense", "units": 5}))
    assert arch.shapes()[2] == (8, 8, 8)
    assert build_model(arch).tensors["layer2.weight"].shape == (8 * 8 * 8, 5)


def test_init_is_fan_in_scaled():
    p = build_model(small_cnn(), 0)
    w = p.tensors["layer0.weight"]
    assert np.abs(w).max() <= 1 / math.sqrt(27)
    assert abs(w.mean()) < 0.05


@pytest.mark.parametrize("layers, where", [
    (({"type": "conv", "out_channels": 4, "kernel": 20},), "layer 0"),
    (({"type": "relu"}, {"type": "dense", "units": 4}), "layer 1"),
    (({"type": "dense", "units": 3}, {"type": "pool"}), "layer 1"),
    (({"type": "warp"},), "layer 0"),
])
def test_inconsistent_arch_names_layer(layers, where):
    with pytest.raises(ConfigError, match=where):
        ArchSpec(16, 16, 3, 3, layers)


def test_arch_json_round_trip():
    arch = small_cnn(12, 10, 1, 4)
    assert ArchSpec.from_dict(arch.to_dict()) == arch


# --------------------------------------------------------------------------- forward

def test_zero_weights_give_zero_logits():
    p = build_model(small_cnn(), 0)
    p = ClassifierParams(p.arch, {k: np.zeros_like(v) for k, v in p.tensors.items()})
    x = np.random.default_rng(0).random((3, 16, 16, 3))
    assert np.array_equal(forward(p, x), np.zeros((3, 3), np.float32))


def test_hand_computed_dense():
    p = ClassifierParams(dense_arch(), {"layer0.weight": np.array([[1.0, 0.0]], np.float32),
                                        "layer0.bias": np.zeros(2, np.float32)})
    assert np.array_equal(forward(p, np.full((1, 1, 1, 1), 0.5)), [[0.5, 0.0]])


def test_batch_rows():
    p = build_model(small_cnn(), 0)
    assert forward(p, np.zeros((5, 16, 16, 3))).shape == (5, 3)


def test_rows_independent_of_batch_composition():
    p = build_model(small_cnn(), 1)
    x = np.random.default_rng(1).random((9, 16, 16, 3)).astype(np.float32)
    full = forward(p, x)
    for i in range(9):
        assert np.array_equal(forward(p, x[i:i + 1])[0], full[i])
    assert np.array_equal(forward(p, x[[4, 2]]), full[[4, 2]])


def test_forward_is_pure():
    p = build_model(small_cnn(), 2)
    x = np.random.default_rng(2).random((4, 16, 16, 3)).astype(np.float32)
    before = x.copy()
    assert np.array_equal(forward(p, x), forward(p, x))
    assert np.array_equal(x, before)


def test_shape_mismatch_is_input_error():
    with pytest.raises(InputError):
        forward(build_model(small_cnn(), 0), np.zeros((1, 8, 8, 3)))


# --------------------------------------------------------------------------- cross_entropy

@pytest.mark.parametrize("logits, label, expected", [
    (np.zeros(10), 3, math.log(10)),
    (np.zeros(2), 0, math.log(2)),
    (np.array([3.0, 1.0]), 0, math.log(1 + math.exp(-2))),
])
def test_cross_entropy_values(logits, label, expected):
    assert cross_entropy(logits[None], [label]) == pytest.approx(expected, abs=1e-6)


def test_cross_entropy_is_batch_mean():
    logits = np.array([[0.0, 0.0], [3.0, 1.0]])
    assert cross_entropy(logits, [0, 0]) == pytest.approx(
        (math.log(2) + math.log(1 + math.exp(-2))) / 2)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(InputError):
        cross_entropy(np.zeros((1, 3)), [3])
    with pytest.raises(InputError):
        cross_entropy(np.zeros((1, 3)), [-1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.floats(-100, 100),
       st.data())
def test_cross_entropy_shift_invariance(logits, c, data):
    logits = np.array([logits])
    y = data.draw(st.integers(0, logits.shape[1] - 1))
    a = cross_entropy(logits, [y])
    assert a >= 0
    assert cross_entropy(logits + c, [y]) == pytest.approx(a, abs=1e-6)


# --------------------------------------------------------------------------- gradients

def test_input_gradient_shape():
    p = build_model(small_cnn(), 0)
    img = np.random.default_rng(0).random((16, 16, 3))
    assert input_gradient(p, img, 1).shape == (16, 16, 3)


def test_linear_model_closed_form():
    rng = np.random.default_rng(5)
    arch = dense_arch(2, 3, 2, 4)
    p = build_model(arch, 5)
    img = rng.random((2, 3, 2)).astype(np.float32)
    w = p.tensors["layer0.weight"].astype(np.float64)
    z = img.reshape(-1) @ w
    s = np.exp(z - z.max())
    s /= s.sum()
    s[2] -= 1
    np.testing.assert_allclose(input_gradient(p, img, 2), (w @ s).reshape(img.shape),
                               rtol=1e-5, atol=1e-6)


# Central differences with step 1e-3 are only meaningful when both stencil points
# sit on the same linear piece of the ReLU/max-pool network; coordinates whose
# stencil straddles a kink are checked with a small step instead.

def test_input_gradient_finite_differences():
    rng = np.random.default_rng(11)
    p = build_model(small_cnn(), 11)
    img = rng.random((16, 16, 3)).astype(np.float32)
    g = input_gradient(p, img, 2)
    coords = [tuple(rng.integers(s) for s in img.shape) for _ in range(40)]
    analytic = np.array([g[c] for c in coords])
    numeric, smooth = fd_input_grad(p, img, 2, coords, h=1e-3, smooth_only=True)
    assert smooth.sum() >= 25
    assert grad_rel_error(analytic[smooth], numeric[smooth]) < 1e-3
    assert grad_rel_error(analytic, fd_input_grad(p, img, 2, coords, h=1e-6)) < 1e-3


def test_param_gradient_finite_differences():
    rng = np.random.default_rng(12)
    p = build_model(small_cnn(), 12)
    batch = ImageBatch(rng.random((4, 16, 16, 3)), rng.integers(0, 3, 4))
    grads = param_gradient(p, batch)
    picks = []
    for _ in range(40):
        name = sorted(p.tensors)[rng.integers(len(p.tensors))]
        picks.append((name, tuple(rng.integers(s) for s in p.tensors[name].shape)))
    analytic = np.array([grads[n][i] for n, i in picks])
    numeric, smooth = fd_param_grad(p, batch, picks, h=1e-3, smooth_only=True)
    assert smooth.sum() >= 10
    assert grad_rel_error(analytic[smooth], numeric[smooth]) < 1e-3
    assert grad_rel_error(analytic, fd_param_grad(p, batch, picks, h=1e-6)) < 1e-3


def test_duplicated_batch_keeps_mean_gradient():
    rng = np.random.default_rng(3)
    p = build_model(small_cnn(), 3)
    x = rng.random((3, 16, 16, 3)).astype(np.float32)
    y = np.array([0, 1, 2])
    _, g1 = loss_and_param_grad(p, x, y)
    _, g2 = loss_and_param_grad(p, np.concatenate([x, x]), np.concatenate([y, y]))
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-5, atol=1e-7)


def test_gradient_vanishes_at_interpolating_fit():
    # one dense layer on two separable points; drive the loss to ~0 then check the gradient
    arch = dense_arch(1, 1, 2, 2)
    x = np.array([[[[1.0, 0.0]]], [[[0.0, 1.0]]]], np.float32)
    y = np.array([0, 1])
    p = ClassifierParams(arch, {"layer0.weight": np.array([[20.0, -20.0], [-20.0, 20.0]],
                                                          np.float32),
                                "layer0.bias": np.zeros(2, np.float32)})
    loss, grads = loss_and_param_grad(p, x, y)
    assert loss < 1e-8
    assert all(np.abs(g).max() <= 1e-5 for g in grads.values())


# --------------------------------------------------------------------------- sgd_step

def _scalar_params(w):
    arch = dense_arch(1, 1, 1, 2)
    return ClassifierParams(arch, {"layer0.weight": np.array([[w, 0.0]], np.float32),
                                   "layer0.bias": np.zeros(2, np.float32)})


def test_sgd_zero_grads_no_decay_is_identity():
    p = build_model(small_cnn(), 0)
    cfg = TrainConfig(weight_decay=0)
    q = sgd_step(p, {k: np.zeros_like(v) for k, v in p.tensors.items()}, cfg, 3)
    assert all(np.array_equal(p.tensors[k], q.tensors[k]) for k in p.tensors)


def test_sgd_scalar_arithmetic():
    p = _scalar_params(1.0)
    g = {"layer0.weight": np.array([[1.0, 0.0]], np.float32),
         "layer0.bias": np.zeros(2, np.float32)}
    q = sgd_step(p, g, TrainConfig(learning_rate=0.1, lr_decay=1.0, weight_decay=0), 0)
    assert q.tensors["layer0.weight"][0, 0] == pytest.approx(0.9)


def test_sgd_epoch_decay():
    p = _scalar_params(1.0)
    g = {"layer0.weight": np.array([[1.0, 0.0]], np.float32),
         "layer0.bias": np.zeros(2, np.float32)}
    cfg = TrainConfig(learning_rate=0.1, lr_decay=0.95, weight_decay=0)
    step0 = 1 - sgd_step(p, g, cfg, 0).tensors["layer0.weight"][0, 0]
    step1 = 1 - sgd_step(p, g, cfg, 1).tensors["layer0.weight"][0, 0]
    assert step1 / step0 == pytest.approx(0.95, rel=1e-6)
    assert cfg.lr_at(1) == 0.1 * 0.95


def test_sgd_weight_decay():
    p = _scalar_params(2.0)
    zero = {k: np.zeros_like(v) for k, v in p.tensors.items()}
    q = sgd_step(p, zero, TrainConfig(learning_rate=0.5, lr_decay=1, weight_decay=0.1), 0)
    assert q.tensors["layer0.weight"][0, 0] == pytest.approx(2 - 0.5 * 0.1 * 2)


def test_sgd_structure_mismatch():
    p = _scalar_params(1.0)
    with pytest.raises(RuntimeError):
        sgd_step(p, {"layer0.weight": np.zeros((1, 2), np.float32)}, TrainConfig(), 0)
    with pytest.raises(RuntimeError):
        sgd_step(p, {"layer0.weight": np.zeros((2, 2), np.float32),
                     "layer0.bias": np.zeros(2, np.float32)}, TrainConfig(), 0)


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"lr_decay": 0}, {"lr_decay": 1.5},
                                {"weight_decay": -1}, {"batch_size": 0}])
def test_train_config_invariants(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


# --------------------------------------------------------------------------- predict

def _logit_model(logits):
    k = len(logits)
    arch = dense_arch(1, 1, 1, k)
    return ClassifierParams(arch, {"layer0.weight": np.zeros((1, k), np.float32),
                                   "layer0.bias": np.array(logits, np.float32)})


def test_predict_argmax():
    assert predict(_logit_model([0.1, 0.9, 0.3]), np.zeros((1, 1, 1))) == 1


def test_predict_tie_goes_low():
    assert predict(_logit_model([0.5, 0.5]), np.zeros((1, 1, 1))) == 0


def test_predict_matches_forward_argmax():
    p = build_model(small_cnn(), 9)
    x = np.random.default_rng(9).random((100, 16, 16, 3)).astype(np.float32)
    assert np.array_equal(predict_batch(p, x), np.argmax(forward(p, x), axis=1))
    assert [predict(p, im) for im in x[:5]] == list(predict_batch(p, x[:5]))


def test_predict_shift_invariant():
    a = _logit_model([0.2, 0.7, -1.0])
    b = _logit_model([10.2, 10.7, 9.0])
    assert predict(a, np.zeros((1, 1, 1))) == predict(b, np.zeros((1, 1, 1)))


def test_per_example_loss_matches_mean():
    p = build_model(small_cnn(), 4)
    x = np.random.default_rng(4).random((6, 16, 16, 3))
    y = np.arange(6) % 3
    assert per_example_loss(p, x, y).mean() == pytest.approx(cross_entropy(forward(p, x), y))
