import csv

import numpy as np
import pytest

from gradchecks import KINDS, check
from oracles import central_difference
from pcp.finetune import (
    DivergenceError,
    TrainConfig,
    cross_entropy_loss,
    loss_and_grads,
    sgd_finetune,
)
from pcp.graph import ModelGraph, apply_selection, fc
from pcp.toybench import GeneratorSpec, build_reference_model, generate
from pcp.transfer import Dataset


@pytest.fixture(scope="module")
def small():
    spec = GeneratorSpec(n_train=64, n_val=32, n_test=8)
    return generate(spec, "train"), generate(spec, "val")


def test_uniform_logits_loss_is_log_k():
    for k in (2, 4, 10):
        loss, _ = cross_entropy_loss(np.zeros((3, k)), np.array([0, 1, 1]))
        assert loss == pytest.approx(np.log(k), abs=1e-12)


def test_huge_margin_loss_vanishes():
    z = np.full((2, 4), -50.0)
    z[[0, 1], [2, 3]] = 50.0
    loss, grad = cross_entropy_loss(z, np.array([2, 3]))
    assert loss < 1e-30 and np.abs(grad).max() < 1e-30


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError, match="labels"):
        cross_entropy_loss(np.zeros((2, 3)), np.array([0, 3]))


def test_cross_entropy_gradient_tight():
    rng = np.random.default_rng(0)
    z, y = rng.standard_normal((6, 5)), rng.integers(0, 5, 6)
    _, g = cross_entropy_loss(z, y)
    num = central_difference(lambda v: cross_entropy_loss(v, y)[0], z)
    assert np.linalg.norm(g - num) / np.linalg.norm(num) < 1e-4


@pytest.mark.parametrize("kind", KINDS)
def test_backward_matches_finite_differences(kind):
    for seed in range(20):
        assert check(kind, seed) < 1e-3, (kind, seed)


@pytest.mark.parametrize("arch", ["tinyvgg", "tinyres"])
def test_whole_model_gradient_spot_checks(arch):
    rng = np.random.default_rng(1)
    m = build_reference_model(arch, 2)
    beta = np.ones(16, np.uint8)
    beta[[1, 5]] = 0
    m = apply_selection(m, 2, beta, m.layers[2].weight)
    x = rng.standard_normal((3, 3, 8, 8)).astype(np.float32)
    y = np.array([0, 1, 3])
    _, grads = loss_and_grads(m, x, y)
    for i, layer in enumerate(m.layers):
        if layer.kind not in ("conv", "fc"):
            continue
        flat = layer.weight.reshape(-1)
        for j in rng.choice(flat.size, 4, replace=False):
            def f(v, i=i, j=j):
                w = layer.weight.astype(np.float64).reshape(-1).copy()
                w[j] = v[0]
                layers = list(m.layers)
                layers[i] = layer.replace(weight=w.reshape(layer.weight.shape))
                return loss_and_grads(m.replace(layers=tuple(layers)), x, y)[0]
            num = central_difference(f, [float(flat[j])], eps=1e-4)[0]
            ana = grads[i][0].reshape(-1)[j]
            if i == 2 and beta[(j // 9) % 16] == 0:
                assert ana == 0.0
            else:
                assert abs(ana - num) <= 1e-3 * max(abs(num), 1e-2)


def test_lr_zero_is_identity(small):
    train, _ = small
    m = build_reference_model("tinyvgg", 0)
    out, history = sgd_finetune(m, train, TrainConfig(lr=0.0, epochs=2))
    assert out is m and history == []


def test_single_linear_layer_step_matches_hand_gradient():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((8, 5)).astype(np.float32)
    y = rng.integers(0, 3, 8)
    W = rng.standard_normal((3, 5)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    m = ModelGraph([fc(W, b)], (5,))
    out, _ = sgd_finetune(m, Dataset(X, y), TrainConfig(lr=0.1, epochs=1, batch_size=8))
    Xd = X.astype(np.float64)
    z = Xd @ W.T.astype(np.float64) + b
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    p[np.arange(8), y] -= 1.0
    p /= 8
    np.testing.assert_allclose(out.layers[0].weight, (W - 0.1 * p.T @ Xd).astype(np.float32), atol=1e-6)
    np.testing.assert_allclose(out.layers[0].bias, (b - 0.1 * p.sum(0)).astype(np.float32), atol=1e-6)


def test_no_resurrection_and_reproducible(small, tmp_path):
    train, val = small
    m = build_reference_model("tinyres", 0)
    beta = np.ones(16, np.uint8)
    beta[:6] = 0
    m = apply_selection(m, 8, beta, m.layers[8].weight)
    cfg = TrainConfig(lr=0.05, epochs=2, batch_size=16, seed=4)
    a, hist = sgd_finetune(m, train, cfg, val=val, log_path=tmp_path / "train_log.csv")
    b, _ = sgd_finetune(m, train, cfg, val=val)
    for l in m.prunable_layers:
        np.testing.assert_array_equal(a.selections[l], m.selections[l])
    assert np.all(a.layers[8].weight[:, :6] == 0)
    assert a == b
    rows = list(csv.DictReader((tmp_path / "train_log.csv").open()))
    assert [int(r["epoch"]) for r in rows] == [1, 2] and len(hist) == 2
    assert all(r["val_accuracy"] for r in rows)


def test_training_reduces_loss(small):
    train, _ = small
    m = build_reference_model("tinyvgg", 1)
    _, hist = sgd_finetune(m, train, TrainConfig(lr=0.05, epochs=4, batch_size=16))
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_divergence_detected(small):
    train, _ = small
    m = build_reference_model("tinyvgg", 0)
    with pytest.raises(DivergenceError, match="learning rate"):
        sgd_finetune(m, train, TrainConfig(lr=1e6, epochs=3))


def test_rejects_unlabelled(small):
    train, _ = small
    with pytest.raises(ValueError, match="labelled"):
        sgd_finetune(build_reference_model("tinyvgg", 0), Dataset(train.images, None), TrainConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
