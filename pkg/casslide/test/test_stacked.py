import numpy as np
import pytest
from PIL import Image

from .. import nn
from ..constants import BACKGROUND_COLOR, CLASS_COLORS
from ..stacked import (
    ProbabilityMap,
    StackedConfig,
    build_stacked,
    dense_predict,
    grid_shape,
    load_stacked,
    predict_slide,
    predict_window,
    render_heatmap,
    save_stacked,
    tissue_grid,
)
from ..utils import ContractError, ShapeError
from ..wrn import build_wrn


@pytest.fixture
def stacked_config():
    return StackedConfig(training_patch_size=64, window_stride=16, top_widths=(4, 4))


@pytest.fixture
def stacked(tiny_wrn, stacked_config):
    return build_stacked(tiny_wrn.freeze(), stacked_config, seed=0)


def _image(height=96, width=96, seed=0):
    return np.random.default_rng(seed).standard_normal((3, height, width)).astype(np.float32)


def test_unfrozen_base_raises(tiny_wrn, stacked_config):
    with pytest.raises(ContractError):
        build_stacked(tiny_wrn, stacked_config)


def test_window_smaller_than_base_patch_raises(tiny_wrn):
    with pytest.raises(ContractError):
        build_stacked(tiny_wrn.freeze(), StackedConfig(training_patch_size=16))


@pytest.mark.parametrize("kwargs", [dict(training_patch_size=100), dict(window_stride=0)])
def test_invalid_configuration_raises(kwargs):
    with pytest.raises(ValueError):
        StackedConfig(**kwargs)


def test_predict_window(stacked):
    probabilities = predict_window(stacked, _image(64, 64))
    assert probabilities.shape == (1, 3)
    assert np.isclose(probabilities.sum(), 1, atol=1e-6)


def test_predict_window_raises_on_wrong_size(stacked):
    with pytest.raises(ShapeError):
        predict_window(stacked, _image(96, 96))


def test_training_keeps_no_base_activations(stacked):
    """
    Only the top network caches activations and receives gradients.
    """
    base_before = {name: value.copy() for name, value in stacked.base.tensors()}
    logits = stacked.forward(np.stack([_image(64, 64, seed) for seed in range(2)]), train=True)
    assert stacked.base.cached_bytes() == 0
    assert stacked.top.cached_bytes() > 0
    target = np.array([0, 2])
    _, probabilities = nn.softmax_cross_entropy(logits, target)
    stacked.backward(nn.softmax_cross_entropy_grad(probabilities, target))
    nn.NesterovSGD(0.1).step(stacked)
    assert all(name.startswith("top.") for name in stacked.gradients())
    for name, layer, key in stacked.base.named_parameters():
        assert key not in layer.grads
    for name, value in stacked.base.tensors():
        assert np.array_equal(value, base_before[name])


def test_base_bytes_survive_training(stacked):
    before = nn.weights_to_bytes(stacked.base)
    top_before = nn.weights_to_bytes(stacked.top)
    optimizer = nn.NesterovSGD(0.05)
    images = np.stack([_image(64, 64, seed) for seed in range(3)])
    target = np.array([0, 1, 2])
    for _ in range(50):
        _, probabilities = nn.softmax_cross_entropy(stacked.forward(images, train=True), target)
        stacked.backward(nn.softmax_cross_entropy_grad(probabilities, target))
        optimizer.step(stacked)
    assert nn.weights_to_bytes(stacked.base) == before
    assert nn.weights_to_bytes(stacked.top) != top_before


def test_dense_prediction_matches_windows(stacked):
    image = _image(96, 112)
    probability_map = dense_predict(stacked, image)
    assert probability_map.shape == (3, 4)
    for ii in range(3):
        for jj in range(4):
            window = image[:, 16 * ii:16 * ii + 64, 16 * jj:16 * jj + 64]
            assert np.array_equal(
                probability_map.grid[ii, jj], predict_window(stacked, window)[0]
            )


def test_threaded_prediction_is_identical(stacked):
    image = _image()
    sequential = dense_predict(stacked, image, threads=1)
    threaded = dense_predict(stacked, image, threads=3)
    assert np.array_equal(sequential.grid, threaded.grid)


def test_background_cells_are_skipped(stacked):
    tissue = np.ones((3, 3), dtype=bool)
    tissue[0] = False
    probability_map = dense_predict(stacked, _image(), tissue=tissue)
    assert np.array_equal(probability_map.background, ~tissue)
    assert np.all(probability_map.grid[0] == [1, 0, 0])
    assert np.array_equal(probability_map.tissue, tissue)


def test_tissue_grid_must_match(stacked):
    with pytest.raises(ShapeError):
        dense_predict(stacked, _image(), tissue=np.ones((2, 2), dtype=bool))


def test_image_smaller_than_window_raises(stacked):
    with pytest.raises(ContractError):
        dense_predict(stacked, _image(48, 96))


@pytest.mark.parametrize(
    "height,width,window,stride,expected",
    [(1000, 800, 768, 224, (2, 1)), (768, 768, 768, 224, (1, 1)), (2048, 1500, 512, 224, (7, 5))],
)
def test_grid_shape(height, width, window, stride, expected):
    assert grid_shape(height, width, window, stride) == expected


def test_tissue_grid():
    tissue = np.zeros((96, 96), dtype=bool)
    tissue[:, 48:] = True
    flags = tissue_grid(tissue, 64, 16)
    assert flags.shape == (3, 3)
    assert not flags[:, 0].any()
    assert flags[:, 2].all()


def test_predict_slide(stacked, mean_rgb):
    image = np.full((96, 96, 3), 250, dtype=np.uint8)
    image[:, 40:] = (180, 80, 150)
    probability_map = predict_slide(stacked, image, mean_rgb, pixel_spacing_um=0.5)
    assert probability_map.shape == (3, 3)
    assert probability_map.cell_spacing_um == 8.0
    assert probability_map.background[:, 0].all()
    assert not probability_map.background[:, 2].any()


def test_probability_map_on_disk(tmp_path):
    grid = np.random.default_rng(0).dirichlet(np.ones(3), size=(2, 3)).astype(np.float32)
    background = np.array([[True, False, False], [False, False, True]])
    probability_map = ProbabilityMap(grid, 768, 224, pixel_spacing_um=0.25, background=background)
    path = str(tmp_path / "slide.probmap")
    probability_map.save(path)
    loaded = ProbabilityMap.load(path)
    assert np.array_equal(loaded.grid, grid)
    assert np.array_equal(loaded.background, background)
    assert (loaded.window, loaded.stride, loaded.pixel_spacing_um) == (768, 224, 0.25)


def test_probability_map_rejects_other_files():
    with pytest.raises(ContractError):
        ProbabilityMap.from_bytes(b'{"format": "other"}\n')


def test_probability_map_needs_three_classes():
    with pytest.raises(ShapeError):
        ProbabilityMap(np.zeros((2, 2, 2)), 768, 224)


def test_render_heatmap(tmp_path):
    grid = np.zeros((1, 4, 3))
    grid[0, 0, 0] = grid[0, 1, 1] = grid[0, 2, 2] = grid[0, 3, 2] = 1
    background = np.array([[False, False, False, True]])
    path = str(tmp_path / "heatmap.png")
    render_heatmap(ProbabilityMap(grid, 768, 224, background=background), path)
    pixels = np.asarray(Image.open(path))
    assert pixels.shape == (1, 4, 3)
    assert [tuple(value) for value in pixels[0]] == list(CLASS_COLORS) + [BACKGROUND_COLOR]


def test_save_and_load(tmp_path, stacked):
    path = str(tmp_path / "stacked.weights")
    save_stacked(stacked, path)
    loaded = load_stacked(path)
    assert loaded.base.frozen
    assert loaded.config == stacked.config
    window = _image(64, 64)
    assert np.array_equal(predict_window(loaded, window), predict_window(stacked, window))


def test_load_rejects_patch_network(tmp_path, tiny_wrn):
    path = str(tmp_path / "wrn.weights")
    nn.save_weights(tiny_wrn, path, meta=dict(model="wrn"))
    with pytest.raises(ContractError):
        load_stacked(path)


def test_base_is_shared_not_copied(tiny_wrn, stacked_config):
    base = tiny_wrn.freeze()
    stacked = build_stacked(base, stacked_config)
    assert stacked.base is base
    assert build_wrn(tiny_wrn.config).n_parameters() < stacked.n_parameters()
