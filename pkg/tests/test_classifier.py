import numpy as np
import pytest
import torch

from counterfax.classifier import (
    ClassifierTrainConfig,
    as_batch,
    bce_prob,
    build_lenet,
    decide_from_prob,
    evaluate_classifier,
    roc_auc,
    train_classifier,
)
from counterfax.data import AugmentConfig, DatasetSplit, make_patch_dataset, split_dataset
from counterfax.errors import ConfigError, ShapeError, UndefinedMetricError


def test_lenet_forward_range_and_shape(rng):
    model = build_lenet(28, seed=0)
    p = model.predict_prob(np.zeros((1, 28, 28), np.float32))
    assert p.shape == (1,) and 0.0 <= p[0] <= 1.0
    probs = model.predict_prob(rng.random((16, 28, 28)).astype(np.float32))
    assert ((probs > 0.2) & (probs < 0.8)).all()  # untrained sanity band


def test_lenet_architecture_layers():
    net = build_lenet(28).net
    assert net.conv1.out_channels == 6 and net.conv1.kernel_size == (5, 5)
    assert net.conv2.out_channels == 16
    assert (net.fc1.out_features, net.fc2.out_features, net.fc3.out_features) == (120, 84, 1)
    assert net.fc1.in_features == 16 * 4 * 4


def test_lenet_seed_determinism():
    assert build_lenet(28, seed=3).param_hash() == build_lenet(28, seed=3).param_hash()
    assert build_lenet(28, seed=3).param_hash() != build_lenet(28, seed=4).param_hash()
    with pytest.raises(ConfigError):
        build_lenet(12)


def test_predict_prob_purity_and_batch_consistency(frozen_lenet, rng):
    x = rng.random((9, 28, 28)).astype(np.float32)
    x[4] = x[2]
    batch = frozen_lenet.predict_prob(x)
    assert batch[4] == batch[2]
    single = np.array([frozen_lenet.predict_prob(x[i])[0] for i in range(9)])
    np.testing.assert_allclose(batch, single, atol=1e-6)
    np.testing.assert_array_equal(batch, frozen_lenet.predict_prob(x))


def test_shape_errors(frozen_lenet):
    with pytest.raises(ShapeError):
        frozen_lenet.predict_prob(np.zeros((2, 27, 28), np.float32))
    with pytest.raises(ShapeError):
        as_batch(np.zeros((2, 3, 28, 28)), 28, 28)


def test_decide_threshold_convention():
    np.testing.assert_array_equal(decide_from_prob([0.9, 0.5, 0.4999], 0.5), [1, 1, 0])
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ConfigError):
            decide_from_prob([0.3], bad)


def test_roc_auc_oracles(rng):
    labels = np.array([0] * 5 + [1] * 5)
    probs = np.where(labels == 1, 0.9, 0.1)
    assert roc_auc(labels, probs) == 1.0
    assert evaluate_classifier_stub(labels, probs) == 1.0
    # brute-force pairwise definition with ties counted half
    y = rng.integers(0, 2, 300)
    s = rng.integers(0, 20, 300).astype(float)
    pos, neg = s[y == 1], s[y == 0]
    brute = ((pos[:, None] > neg[None]).sum() + 0.5 * (pos[:, None] == neg[None]).sum()) / (len(pos) * len(neg))
    assert roc_auc(y, s) == pytest.approx(brute, abs=1e-12)
    y = np.tile([0, 1], 5000)
    assert abs(roc_auc(y, rng.random(10000)) - 0.5) < 0.05
    with pytest.raises(UndefinedMetricError):
        roc_auc(np.ones(4), np.ones(4))


def evaluate_classifier_stub(labels, probs):
    return float((decide_from_prob(probs) == labels).mean())


def test_bce_prob_clamped():
    assert float(bce_prob(torch.ones(1), torch.ones(1))) < 1e-6
    assert float(bce_prob(torch.ones(1), torch.full((1,), 0.5))) == pytest.approx(np.log(2))


def test_bce_gradient_matches_finite_differences():
    torch.manual_seed(0)
    conv = torch.nn.Conv2d(1, 1, 3).double()
    x = torch.rand(4, 1, 5, 5, dtype=torch.float64)
    y = torch.tensor([0.0, 1.0, 1.0, 0.0], dtype=torch.float64)

    def loss():
        return bce_prob(y, torch.sigmoid(conv(x).mean((1, 2, 3))))

    l = loss()
    (g,) = torch.autograd.grad(l, conv.weight)
    h = 1e-4
    with torch.no_grad():
        for idx in [(0, 0, 0, 0), (0, 0, 1, 2), (0, 0, 2, 1)]:
            conv.weight[idx] += h
            up = float(loss())
            conv.weight[idx] -= 2 * h
            down = float(loss())
            conv.weight[idx] += h
            fd = (up - down) / (2 * h)
            assert abs(fd - float(g[idx])) <= 1e-3 * max(abs(fd), 1e-8)


def _patch_split(n=150, seed=0):
    return split_dataset(make_patch_dataset(n, seed=seed), (0.6, 0.2, 0.2), seed)


def test_train_classifier_on_patches():
    split = _patch_split()
    model = build_lenet(28, seed=0)
    cfg = ClassifierTrainConfig(epochs=4, batch_size=32, learning_rate=1e-3, augment=AugmentConfig.disabled())
    before = model.param_hash()
    out = train_classifier(model, split, cfg)
    assert out is model and model.frozen
    assert model.param_hash() != before
    assert model.history[-1]["train_loss"] < model.history[0]["train_loss"]
    metrics = evaluate_classifier(model, split.test.images, split.test.labels)
    assert metrics["auc"] > 0.95
    assert all(not p.requires_grad for p in model.net.parameters())
    with pytest.raises(ConfigError):
        train_classifier(model, split, cfg)


def test_train_classifier_deterministic():
    split = _patch_split(60)
    cfg = ClassifierTrainConfig(epochs=1, batch_size=16, learning_rate=1e-3)
    a = train_classifier(build_lenet(28, seed=1), split, cfg)
    b = train_classifier(build_lenet(28, seed=1), split, cfg)
    assert a.param_hash() == b.param_hash()


def test_train_classifier_empty_set():
    empty = make_patch_dataset(0)
    with pytest.raises(ConfigError):
        train_classifier(build_lenet(28), DatasetSplit(empty, empty, empty), ClassifierTrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        ClassifierTrainConfig(epochs=0)


def test_save_load_roundtrip(tmp_path, frozen_lenet, rng):
    path = tmp_path / "clf.npz"
    digest = frozen_lenet.save(path, {"seed": 0})
    loaded = type(frozen_lenet).load(path)
    assert loaded.frozen and loaded.param_hash() == digest
    x = rng.random((3, 28, 28)).astype(np.float32)
    np.testing.assert_array_equal(loaded.predict_prob(x), frozen_lenet.predict_prob(x))
    assert (tmp_path / "clf.json").is_file()
