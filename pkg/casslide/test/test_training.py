import csv

import numpy as np
import pytest

from ..data import PatchDataset
from ..training import (
    LOG_COLUMNS,
    ScheduleState,
    TrainConfig,
    balanced_accuracy,
    evaluate_patches,
    hard_negative_mine,
    mine_regions,
    regions_from_dict,
    regions_to_dict,
    schedule_step,
    train,
)
from ..utils import ContractError
from ..wrn import build_wrn
from .conftest import striped_slide


def test_improvement_resets_counter():
    state = ScheduleState(0.05, epochs_since_improvement=5, best_validation_accuracy=0.5)
    state = schedule_step(state, 0.6)
    assert state.epochs_since_improvement == 0
    assert state.best_validation_accuracy == 0.6
    assert state.learning_rate == 0.05


def test_equal_accuracy_is_not_an_improvement():
    state = schedule_step(ScheduleState(0.05, best_validation_accuracy=0.5), 0.5)
    assert state.epochs_since_improvement == 1


def test_plateau_schedule():
    """
    After a first improvement the rate drops by 0.2 every time the patience
    runs out, and the patience grows 8, 10, 12, 15.
    """
    state = schedule_step(ScheduleState(0.05), 0.9)
    drops = list()
    for epoch in range(1, 60):
        previous = state.learning_rate
        state = schedule_step(state, 0.5)
        if state.learning_rate != previous:
            drops.append((epoch, state.patience))
    assert drops == [(8, 10), (18, 12), (30, 15), (45, 18)]
    assert np.isclose(state.learning_rate, 0.05 * 0.2**4)


def test_train_config_defaults():
    wrn = TrainConfig.for_wrn()
    assert (wrn.batch_size, wrn.initial_lr, wrn.patch_size) == (22, 0.05, 224)
    stacked = TrainConfig.for_stacked(768)
    assert (stacked.batch_size, stacked.initial_lr, stacked.patch_size) == (18, 0.005, 768)
    assert TrainConfig.for_stacked(1024).batch_size == 10
    assert TrainConfig.for_stacked(512, batch_size=4).batch_size == 4


def test_balanced_accuracy():
    labels = [0, 0, 0, 0, 1, 2]
    predictions = [0, 0, 0, 0, 2, 2]
    assert balanced_accuracy(labels, predictions, 3) == pytest.approx(2 / 3)
    assert balanced_accuracy([0, 0, 2], [0, 1, 2], 3) == pytest.approx(0.75)


def _dataset():
    images, masks = zip(*(striped_slide(size=128, lesion=lesion) for lesion in (2, 3)))
    return PatchDataset(images, masks)


def _config(**kwargs):
    options = dict(
        batch_size=6, initial_lr=0.01, patch_size=32, epoch_batches=2, max_epochs=2,
        validation_per_class=2,
    )
    options.update(kwargs)
    return TrainConfig(**options)


def test_training_updates_weights_and_writes_log(tmp_path, tiny_wrn, mean_rgb):
    before = {name: value.copy() for name, value in tiny_wrn.tensors()}
    log_path = str(tmp_path / "log.csv")
    _, log = train(tiny_wrn, _dataset(), _config(), mean_rgb, log_path=log_path)
    assert [record.epoch for record in log] == [0, 1]
    assert all(np.isfinite(record.loss) for record in log)
    assert not np.array_equal(before["0.weight"], dict(tiny_wrn.tensors())["0.weight"])
    with open(log_path) as ff:
        rows = list(csv.reader(ff))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert len(rows) == 3


def test_training_is_reproducible(tiny_wrn_config, mean_rgb):
    results = list()
    for prefetch in (False, True):
        network = build_wrn(tiny_wrn_config, seed=0)
        train(network, _dataset(), _config(prefetch=prefetch), mean_rgb)
        results.append(dict(network.tensors()))
    assert all(np.array_equal(results[0][name], results[1][name]) for name in results[0])


def test_training_stops_below_minimum_rate(tiny_wrn, mean_rgb):
    config = _config(initial_patience=1, max_epochs=10, min_lr=0.005)
    _, log = train(tiny_wrn, _dataset(), config, mean_rgb)
    assert len(log) < 10
    assert log[-1].learning_rate >= 0.005


def test_evaluate_patches(tiny_wrn, mean_rgb):
    patches = np.stack([striped_slide(size=32)[0]] * 3)
    accuracy = evaluate_patches(tiny_wrn, patches, np.array([0, 1, 2]), mean_rgb)
    assert accuracy == pytest.approx(1 / 3)


def test_mine_regions_groups_touching_tiles():
    cancer = np.zeros((4, 4), dtype=bool)
    cancer[0, 0] = cancer[1, 1] = True
    cancer[3, 3] = True
    regions = mine_regions(cancer, 8, (30, 32), slide_index=2)
    assert len(regions) == 2
    assert all(region.label == 1 and region.slide_index == 2 for region in regions)
    assert regions[0].pixels.sum() == 2 * 64
    assert regions[1].pixels.shape == (30, 32)
    assert regions[1].pixels.sum() == 6 * 8


def test_mine_regions_restricted_to_tissue():
    cancer = np.ones((1, 1), dtype=bool)
    tissue = np.zeros((8, 8), dtype=bool)
    tissue[:4] = True
    (region,) = mine_regions(cancer, 8, (8, 8), 0, tissue=tissue)
    assert region.pixels.sum() == 32


def _purple_detector(mean_rgb):
    """
    A stand-in patch classifier: IDC wherever the mean red level of the tile
    is below one half.
    """

    def classify(batch):
        red = batch[:, 0].mean(axis=(1, 2)) + mean_rgb[0]
        probabilities = np.zeros((len(batch), 3))
        probabilities[np.arange(len(batch)), np.where(red < 0.5, 2, 0)] = 1
        return probabilities

    return classify


def test_hard_negative_mining(mean_rgb):
    image, _ = striped_slide(size=128)
    regions = hard_negative_mine(_purple_detector(mean_rgb), [image], mean_rgb, tile=16,
                                 slide_indices=[5])
    assert len(regions) == 1
    (region,) = regions
    assert region.slide_index == 5
    assert region.pixels[:, 64:120].sum() == region.pixels.sum()
    assert region.pixels.sum() > 0


def test_hard_negative_mining_on_tiny_slide_raises(mean_rgb):
    with pytest.raises(ContractError):
        hard_negative_mine(_purple_detector(mean_rgb), [np.zeros((8, 8, 3), dtype=np.uint8)],
                           mean_rgb, tile=16)


def test_mined_regions_on_disk(mean_rgb):
    image, _ = striped_slide(size=128)
    regions = hard_negative_mine(_purple_detector(mean_rgb), [image], mean_rgb, tile=16)
    data = regions_to_dict(regions, ["slide"], 16)
    restored = regions_from_dict(data, ["slide"], [image])
    assert len(restored) == len(regions)
    assert np.array_equal(restored[0].pixels, regions[0].pixels)


def test_mined_regions_unknown_slide_raises():
    data = dict(tile=16, regions=[dict(slide_id="missing", label=1, tiles=[[0, 0]])])
    with pytest.raises(ContractError):
        regions_from_dict(data, ["slide"], [np.zeros((16, 16, 3), dtype=np.uint8)])
