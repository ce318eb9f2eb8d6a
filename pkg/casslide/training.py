"""
Training protocol for the patch and stacked networks.

Mini-batches are sampled on the fly with a uniform class distribution,
optimized with Nesterov momentum, and the learning rate is reduced by a
factor of five whenever validation accuracy fails to improve for a number of
epochs (the epoch patience). The patience grows by 20%, rounded up, after
every reduction.

The patch network additionally goes through one round of hard negative
mining: every connected region it predicts as cancer on benign training
slides is added back as a benign training region.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from . import nn
from .constants import BENIGN
from .data import (
    Region,
    class_balanced_batch,
    preprocess,
    tissue_mask,
    validation_patches,
)
from .utils import ContractError, autodoc, rng
from .wrn import WideResNet, predict_proba

xp = np

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss", "accuracy", "learning_rate", "patience")

__all__ = [
    "EpochRecord",
    "ScheduleState",
    "TrainConfig",
    "balanced_accuracy",
    "evaluate_patches",
    "hard_negative_mine",
    "mine_regions",
    "regions_from_dict",
    "regions_to_dict",
    "schedule_step",
    "train",
    "write_log",
]


@dataclass(frozen=True)
class ScheduleState:
    """
    Learning rate plateau schedule state.

    Parameters
    ----------
    learning_rate: float
    patience: int
        Non-improving epochs tolerated before a reduction, default=8
    epochs_since_improvement: int
    best_validation_accuracy: float
    """

    learning_rate: float
    patience: int = 8
    epochs_since_improvement: int = 0
    best_validation_accuracy: float = -np.inf


def schedule_step(state, validation_accuracy, factor=0.2):
    """
    Advance the schedule by one epoch.

    An improvement resets the counter. When the counter reaches the
    patience, the learning rate is multiplied by :code:`factor`, the
    patience grows to :code:`ceil(1.2 * patience)` and the counter resets.

    Parameters
    ----------
    state: ScheduleState
    validation_accuracy: float
    factor: float
        default=0.2

    Returns
    -------
    ScheduleState
    """
    if validation_accuracy > state.best_validation_accuracy:
        return replace(
            state, epochs_since_improvement=0, best_validation_accuracy=validation_accuracy
        )
    waited = state.epochs_since_improvement + 1
    if waited < state.patience:
        return replace(state, epochs_since_improvement=waited)
    return replace(
        state,
        learning_rate=state.learning_rate * factor,
        patience=-(-state.patience * 6 // 5),
        epochs_since_improvement=0,
    )


@dataclass(frozen=True)
class TrainConfig:
    """
    Training loop settings.

    Parameters
    ----------
    batch_size: int
        22 for the patch network, 18 (512, 768) or 10 (1024) for the stacked
        network
    initial_lr: float
        0.05 for the patch network, 0.005 for the stacked network
    patch_size: int
        The sampled patch edge in pixels
    seed: int
    epoch_batches: int
        Mini-batches per epoch, default=100
    max_epochs: int
        default=200
    min_lr: float
        Training stops once the learning rate falls below this, default=1e-6
    initial_patience: int
        default=8
    validation_per_class: int
        Size of the fixed validation patch set per class, default=30
    momentum: float
        default=0.9
    weight_decay: float
        default=0
    augmentation: bool
        default=True
    prefetch: bool
        Sample the next batch in a single producer thread, default=False
    """

    batch_size: int = 22
    initial_lr: float = 0.05
    patch_size: int = 224
    seed: int = 0
    epoch_batches: int = 100
    max_epochs: int = 200
    min_lr: float = 1e-6
    initial_patience: int = 8
    validation_per_class: int = 30
    momentum: float = 0.9
    weight_decay: float = 0.0
    augmentation: bool = True
    prefetch: bool = False

    @classmethod
    def for_wrn(cls, **kwargs):
        return cls(**dict(dict(batch_size=22, initial_lr=0.05, patch_size=224), **kwargs))

    @classmethod
    def for_stacked(cls, window, **kwargs):
        batch_size = 10 if window >= 1024 else 18
        defaults = dict(batch_size=batch_size, initial_lr=0.005, patch_size=window)
        return cls(**dict(defaults, **kwargs))

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    learning_rate: float
    patience: int


def balanced_accuracy(labels, predictions, num_classes):
    """
    Mean per-class recall over the classes present in :code:`labels`.
    """
    labels = xp.asarray(labels)
    predictions = xp.asarray(predictions)
    recalls = [
        xp.mean(predictions[labels == cls] == cls)
        for cls in range(num_classes)
        if xp.any(labels == cls)
    ]
    return float(xp.mean(recalls))


def evaluate_patches(network, patches, labels, mean_rgb, batch_size=32):
    """
    Balanced accuracy of a network on raw 8-bit patches in inference mode.
    """
    predictions = list()
    for start in range(0, len(patches), batch_size):
        batch = preprocess(patches[start:start + batch_size], mean_rgb)
        logits = network.forward(batch, train=False, cache=False)
        predictions.append(xp.argmax(logits[:, :, 0, 0], axis=1))
    num_classes = int(logits.shape[1])
    return balanced_accuracy(labels, xp.concatenate(predictions), num_classes)


def _batches(dataset, config, generator):
    while True:
        yield class_balanced_batch(
            dataset, config.batch_size, config.patch_size, generator,
            augmentation=config.augmentation,
        )


def _prefetched(iterator):
    with ThreadPoolExecutor(max_workers=1) as producer:
        pending = producer.submit(next, iterator)
        while True:
            batch = pending.result()
            pending = producer.submit(next, iterator)
            yield batch


def train(network, dataset, config, mean_rgb, validation=None, log_path=None,
          progress=False):
    """
    Train a network with class-balanced sampling and the plateau schedule.

    Parameters
    ----------
    network: Sequential or StackedNetwork
        Anything with :code:`forward`, :code:`backward`,
        :code:`trainable_parameters` and :code:`clear_cache`
    dataset: PatchDataset
        Training images and masks
    config: TrainConfig
    mean_rgb: array_like
        The training set mean RGB value
    validation: PatchDataset, optional
        Source of the fixed validation patch set, defaults to
        :code:`dataset`
    log_path: str, optional
        Write the per-epoch log as CSV
    progress: bool
        Show a progress bar per epoch

    Returns
    -------
    network:
        The trained network (updated in place)
    log: list[EpochRecord]
    """
    validation = validation or dataset
    val_patches, val_labels = validation_patches(
        validation, config.validation_per_class, config.patch_size,
        rng(config.seed, "validation"),
    )
    optimizer = nn.NesterovSGD(
        config.initial_lr, momentum=config.momentum, weight_decay=config.weight_decay
    )
    state = ScheduleState(config.initial_lr, patience=config.initial_patience)
    batches = _batches(dataset, config, rng(config.seed, "sampling"))
    if config.prefetch:
        batches = _prefetched(batches)
    log = list()
    for epoch in range(config.max_epochs):
        losses = list()
        for _ in tqdm(range(config.epoch_batches), disable=not progress,
                      desc=f"epoch {epoch}"):
            patches, labels = next(batches)
            logits = network.forward(preprocess(patches, mean_rgb), train=True)
            loss, probabilities = nn.softmax_cross_entropy(logits, labels)
            network.backward(nn.softmax_cross_entropy_grad(probabilities, labels))
            optimizer.step(network)
            network.clear_cache()
            losses.append(loss)
            logger.debug("epoch %d loss %.4f", epoch, loss)
        accuracy = evaluate_patches(network, val_patches, val_labels, mean_rgb)
        record = EpochRecord(
            epoch=epoch,
            loss=float(xp.mean(losses)),
            accuracy=accuracy,
            learning_rate=state.learning_rate,
            patience=state.patience,
        )
        log.append(record)
        logger.info(
            "epoch %d loss %.4f validation accuracy %.4f lr %.3g",
            epoch, record.loss, accuracy, state.learning_rate,
        )
        previous = state.learning_rate
        state = schedule_step(state, accuracy)
        if state.learning_rate != previous:
            logger.info("Reducing learning rate to %.3g, patience %d",
                        state.learning_rate, state.patience)
        optimizer.learning_rate = state.learning_rate
        if state.learning_rate < config.min_lr:
            break
    if log_path is not None:
        write_log(log, log_path)
    return network, log


def write_log(log, path):
    with open(path, "w", newline="") as ff:
        writer = csv.writer(ff)
        writer.writerow(LOG_COLUMNS)
        for record in log:
            writer.writerow([getattr(record, column) for column in LOG_COLUMNS])


@autodoc
def mine_regions(cancer, tile, shape, slide_index, tissue=None):
    """
    Turn a tile grid of cancer predictions into benign training regions.

    Every 8-connected group of cancer tiles becomes one :class:`Region`.

    Parameters
    ----------
    cancer: array_like
        Boolean tile grid, :code:`True` where cancer was predicted
    tile: int
        The tile edge in pixels
    shape: tuple
        The slide raster shape
    slide_index: int
    tissue: array_like, optional
        Boolean pixel raster, regions are restricted to tissue pixels

    Returns
    -------
    list[Region]
    """
    labelled, count = ndimage.label(cancer, structure=xp.ones((3, 3), dtype=int))
    regions = list()
    for index in range(1, count + 1):
        tiles = xp.kron(labelled == index, xp.ones((tile, tile), dtype=bool))
        pixels = xp.zeros(shape, dtype=bool)
        rows = min(tiles.shape[0], shape[0])
        cols = min(tiles.shape[1], shape[1])
        pixels[:rows, :cols] = tiles[:rows, :cols]
        if tissue is not None:
            pixels &= tissue
        regions.append(Region(slide_index=slide_index, label=BENIGN, pixels=pixels))
    return regions


def _predict_tiles(model, batch):
    if isinstance(model, WideResNet):
        return predict_proba(model, batch)
    return model(batch)


def hard_negative_mine(model, images, mean_rgb, tile=224, slide_indices=None,
                       min_tissue_fraction=0.5, batch_size=16):
    """
    One round of hard negative mining on benign slides.

    Each slide is tiled with non-overlapping :code:`tile` windows, tissue
    tiles are classified, and every connected group of tiles predicted as
    DCIS or IDC is returned as a benign :class:`Region`.

    Parameters
    ----------
    model: WideResNet or callable
        The trained patch network, or a function mapping preprocessed
        :code:`(n, 3, tile, tile)` batches to class probabilities
    images: list[array_like]
        8-bit RGB benign slides
    mean_rgb: array_like
    tile: int
        default=224
    slide_indices: list[int], optional
        Index of each image in the training :class:`PatchDataset`

    Returns
    -------
    list[Region]
    """
    if slide_indices is None:
        slide_indices = list(range(len(images)))
    regions = list()
    for image, slide_index in zip(images, slide_indices):
        height, width = image.shape[:2]
        rows, cols = height // tile, width // tile
        if rows == 0 or cols == 0:
            raise ContractError(f"Slide {height}x{width} is smaller than one {tile} tile")
        tissue = tissue_mask(image)
        coverage = tissue[:rows * tile, :cols * tile].reshape(rows, tile, cols, tile)
        coverage = coverage.mean(axis=(1, 3))
        cells = xp.argwhere(coverage >= min_tissue_fraction)
        cancer = xp.zeros((rows, cols), dtype=bool)
        for start in range(0, len(cells), batch_size):
            chunk = cells[start:start + batch_size]
            batch = xp.stack(
                [image[r * tile:(r + 1) * tile, c * tile:(c + 1) * tile] for r, c in chunk]
            )
            probabilities = _predict_tiles(model, preprocess(batch, mean_rgb))
            cancer[chunk[:, 0], chunk[:, 1]] = xp.argmax(probabilities, axis=1) > 0
        found = mine_regions(cancer, tile, (height, width), slide_index, tissue=tissue)
        logger.info("Mined %d false positive regions from slide %d", len(found), slide_index)
        regions.extend(found)
    return regions


def regions_to_dict(regions, slide_ids, tile):
    """
    Compact JSON form of mined regions, one tile list per region.
    """
    entries = list()
    for region in regions:
        rows, cols = region.pixels.shape[0] // tile, region.pixels.shape[1] // tile
        grid = region.pixels[:rows * tile, :cols * tile].reshape(rows, tile, cols, tile)
        grid = grid.any(axis=(1, 3))
        entries.append(
            dict(
                slide_id=slide_ids[region.slide_index],
                label=int(region.label),
                tiles=xp.argwhere(grid).tolist(),
            )
        )
    return dict(tile=tile, regions=entries)


def regions_from_dict(data, slide_ids, images):
    """
    Rebuild :class:`Region` objects from :func:`regions_to_dict` output.
    """
    tile = data["tile"]
    lookup = {slide_id: index for index, slide_id in enumerate(slide_ids)}
    regions = list()
    for entry in data["regions"]:
        if entry["slide_id"] not in lookup:
            raise ContractError(f"Mined region refers to unknown slide {entry['slide_id']}")
        index = lookup[entry["slide_id"]]
        image = images[index]
        pixels = xp.zeros(image.shape[:2], dtype=bool)
        for row, col in entry["tiles"]:
            pixels[row * tile:(row + 1) * tile, col * tile:(col + 1) * tile] = True
        pixels &= tissue_mask(image)
        regions.append(Region(slide_index=index, label=entry["label"], pixels=pixels))
    return regions
