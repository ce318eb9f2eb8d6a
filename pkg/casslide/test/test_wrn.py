import numpy as np
import pytest

from .. import nn
from ..utils import ContractError, ShapeError
from ..wrn import (
    WrnConfig,
    build_wrn,
    extract_features,
    load_wrn,
    parameter_count,
    predict_proba,
    save_wrn,
)


def _patches(n, size, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 3, size, size)).astype(np.float32)


@pytest.mark.parametrize(
    "config", [WrnConfig(), WrnConfig(n_blocks_per_group=2, width_multiplier=4, num_classes=2)]
)
def test_parameter_count(config):
    assert build_wrn(config).n_parameters() == parameter_count(config)


def test_default_configuration():
    config = WrnConfig()
    assert config.widths == (32, 64, 128)
    assert config.feature_channels == 128
    assert config.patch_size == 224


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n_blocks_per_group=0),
        dict(width_multiplier=0),
        dict(num_classes=4),
        dict(base_widths=(16, 32)),
        dict(patch_size=100),
    ],
)
def test_invalid_configuration_raises(kwargs):
    with pytest.raises(ValueError):
        WrnConfig(**kwargs)


def test_configuration_round_trip():
    config = WrnConfig(n_blocks_per_group=1, base_widths=[8, 8, 8])
    assert WrnConfig.from_dict(config.to_dict()) == config


@pytest.mark.parametrize("size", [32, 64])
def test_feature_shape(tiny_wrn, size):
    features = extract_features(tiny_wrn, _patches(2, size))
    assert features.shape == (2, 4, size // 16, size // 16)


def test_head_on_features_matches_network(tiny_wrn):
    patches = _patches(3, 32)
    features = extract_features(tiny_wrn, patches)
    logits = tiny_wrn.head.forward(features, cache=False)
    assert np.allclose(logits, tiny_wrn.forward(patches, cache=False), atol=1e-6)


def test_predictions_are_probabilities(tiny_wrn):
    probabilities = predict_proba(tiny_wrn, _patches(4, 32))
    assert probabilities.shape == (4, 3)
    assert np.all(probabilities >= 0)
    assert np.allclose(probabilities.sum(axis=1), 1, atol=1e-6)


def test_inference_does_not_depend_on_batch(tiny_wrn):
    patches = _patches(4, 32)
    together = predict_proba(tiny_wrn, patches)
    alone = predict_proba(tiny_wrn, patches[2:3])
    assert np.allclose(together[2], alone[0], atol=1e-6)


def test_input_smaller_than_patch_raises(tiny_wrn):
    with pytest.raises(ContractError):
        predict_proba(tiny_wrn, _patches(1, 16))


def test_input_not_multiple_of_sixteen_raises(tiny_wrn):
    with pytest.raises(ContractError):
        extract_features(tiny_wrn, _patches(1, 40))


def test_input_must_be_rgb(tiny_wrn):
    with pytest.raises(ShapeError):
        predict_proba(tiny_wrn, np.zeros((1, 4, 32, 32)))


def test_same_seed_same_weights(tiny_wrn_config):
    first = dict(build_wrn(tiny_wrn_config, seed=3).tensors())
    second = dict(build_wrn(tiny_wrn_config, seed=3).tensors())
    other = dict(build_wrn(tiny_wrn_config, seed=4).tensors())
    assert all(np.array_equal(first[name], second[name]) for name in first)
    assert not np.array_equal(first["0.weight"], other["0.weight"])


def test_save_and_load(tmp_path, tiny_wrn):
    path = str(tmp_path / "wrn.weights")
    save_wrn(tiny_wrn, path)
    loaded = load_wrn(path)
    assert loaded.config == tiny_wrn.config
    patches = _patches(2, 32)
    assert np.array_equal(predict_proba(loaded, patches), predict_proba(tiny_wrn, patches))


def test_load_rejects_other_models(tmp_path, tiny_wrn):
    path = str(tmp_path / "other.weights")
    nn.save_weights(tiny_wrn, path, meta=dict(model="stacked"))
    with pytest.raises(ContractError):
        load_wrn(path)


def test_three_block_gradients(float64, tiny_wrn_config):
    network = build_wrn(tiny_wrn_config, seed=3)
    assert sum(isinstance(layer, nn.ResidualBlock) for layer in network.layers) == 3
    input = np.random.default_rng(2).standard_normal((4, 3, 32, 32))
    target = np.array([0, 1, 2, 1])

    def loss():
        return nn.softmax_cross_entropy(network.forward(input, train=True, cache=False), target)[0]

    _, probabilities = nn.softmax_cross_entropy(network.forward(input, train=True), target)
    network.backward(nn.softmax_cross_entropy_grad(probabilities, target))
    gradients = network.gradients()
    for name, layer, key in network.trainable_parameters():
        analytic = gradients[name]
        numeric = nn.numerical_gradient(loss, layer.params[key], eps=1e-6)
        error = np.linalg.norm(analytic - numeric)
        scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        assert error / scale < 1e-4, name
