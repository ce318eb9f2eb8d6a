"""
Slide datasets, patch preprocessing, augmentation and on-the-fly sampling.

A dataset is a directory of paired :code:`image_XXXX.png` (8-bit RGB) and
:code:`mask_XXXX.png` (8-bit labels) files with an :code:`index.json`
listing every slide with its split and slide-level label::

    {
        "pixel_spacing_um": 1.0,
        "slides": [
            {"id": "0000", "image": "image_0000.png", "mask": "mask_0000.png",
             "split": "train", "label": "dcis"},
            ...
        ]
    }

Patches are drawn centred on uniformly chosen annotated pixels of a class,
with mirror padding at the image border.
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from skimage.color import hsv2rgb, rgb2hsv

from .constants import BENIGN, CLASS_NAMES, DCIS, IDC
from .utils import ContractError, ShapeError, autodoc

xp = np

logger = logging.getLogger(__name__)

INDEX_NAME = "index.json"
SPLITS = ("train", "val", "test")

THREE_CLASS = ((BENIGN,), (DCIS,), (IDC,))
BINARY = ((BENIGN,), (DCIS, IDC))

__all__ = [
    "BINARY",
    "PatchDataset",
    "Region",
    "Slide",
    "SlideDataset",
    "THREE_CLASS",
    "augment",
    "balanced_labels",
    "class_balanced_batch",
    "compute_mean_rgb",
    "crop_patch",
    "jitter_hsv",
    "load_mean_rgb",
    "preprocess",
    "sample_patch",
    "save_mean_rgb",
    "tissue_mask",
    "validation_patches",
    "write_index",
]


@dataclass(frozen=True)
class Slide:
    """
    One entry of the dataset index.

    Parameters
    ----------
    slide_id: str
    image: str
        Image file name relative to the dataset root
    mask: str
        Mask file name relative to the dataset root
    split: str
        One of :code:`train`, :code:`val` or :code:`test`
    label: int
        Slide label as a class index (0 benign, 1 DCIS, 2 IDC)
    """

    slide_id: str
    image: str
    mask: str
    split: str
    label: int

    def to_dict(self):
        return dict(
            id=self.slide_id, image=self.image, mask=self.mask, split=self.split,
            label=CLASS_NAMES[self.label],
        )

    @classmethod
    def from_dict(cls, data):
        missing = {"id", "image", "mask", "split", "label"} - set(data)
        if missing:
            raise ContractError(f"Slide entry is missing {sorted(missing)}")
        label = data["label"]
        if isinstance(label, str):
            if label not in CLASS_NAMES:
                raise ContractError(f"Unknown slide label {label!r}")
            label = CLASS_NAMES.index(label)
        if data["split"] not in SPLITS:
            raise ContractError(f"Unknown split {data['split']!r} for slide {data['id']}")
        return cls(str(data["id"]), data["image"], data["mask"], data["split"], int(label))


class SlideDataset:
    """
    Read access to a dataset directory.

    Parameters
    ----------
    root: str
        The directory containing :code:`index.json`
    """

    def __init__(self, root):
        self.root = root
        path = os.path.join(root, INDEX_NAME)
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        with open(path) as ff:
            try:
                index = json.load(ff)
            except json.JSONDecodeError as error:
                raise ContractError(f"{path} is not valid JSON: {error}") from error
        self.pixel_spacing_um = float(index.get("pixel_spacing_um", 1.0))
        if "slides" not in index:
            raise ContractError(f"{path} lists no slides")
        self.slides = [Slide.from_dict(entry) for entry in index["slides"]]

    def __len__(self):
        return len(self.slides)

    def split(self, *names):
        return [slide for slide in self.slides if slide.split in names]

    def path(self, name):
        path = os.path.join(self.root, name)
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        return path

    def load_image(self, slide):
        with Image.open(self.path(slide.image)) as image:
            return xp.asarray(image.convert("RGB"))

    def load_mask(self, slide):
        with Image.open(self.path(slide.mask)) as image:
            mask = xp.asarray(image)
        if mask.max(initial=0) > IDC:
            raise ContractError(f"Mask {slide.mask} has labels outside 0-3")
        return mask


def write_index(root, slides, pixel_spacing_um=1.0):
    """
    Write :code:`index.json` for a list of :class:`Slide`.
    """
    index = dict(
        pixel_spacing_um=pixel_spacing_um,
        slides=[slide.to_dict() for slide in slides],
    )
    with open(os.path.join(root, INDEX_NAME), "w") as ff:
        json.dump(index, ff, indent=2)


@autodoc
def preprocess(patch, mean_rgb):
    """
    Scale 8-bit RGB to :code:`[0, 1]`, subtract the training mean and move
    channels first.

    Parameters
    ----------
    patch: array_like
        Raw RGB with shape :code:`(h, w, 3)` or :code:`(n, h, w, 3)`
    mean_rgb: array_like
        The per-channel training set mean in :code:`[0, 1]`

    Returns
    -------
    array_like
        :code:`float32` values with shape :code:`(3, h, w)` or
        :code:`(n, 3, h, w)`
    """
    patch = xp.asarray(patch)
    if patch.shape[-1] != 3:
        raise ShapeError("Expected RGB data in the last axis", patch.shape)
    values = patch.astype(xp.float32) / 255 - xp.asarray(mean_rgb, dtype=xp.float32)
    return xp.ascontiguousarray(xp.moveaxis(values, -1, -3))


@autodoc
def tissue_mask(image, threshold=0.1):
    """
    Pixels whose HSV saturation exceeds :code:`threshold`.

    Parameters
    ----------
    {image}
    threshold: float
        default=0.1

    Returns
    -------
    array_like
        Boolean :code:`(height, width)` raster
    """
    return rgb2hsv(xp.asarray(image))[..., 1] > threshold


def compute_mean_rgb(dataset, split="train"):
    """
    Per-channel mean over the tissue pixels of the slides in one split.

    Returns
    -------
    array_like
        Three :code:`float64` values in :code:`[0, 1]`
    """
    slides = dataset.split(split)
    if not slides:
        raise ContractError(f"No slides in the {split} split")
    total = xp.zeros(3, dtype=xp.float64)
    count = 0
    for slide in slides:
        image = dataset.load_image(slide)
        pixels = image[tissue_mask(image)]
        total += pixels.sum(axis=0, dtype=xp.float64)
        count += len(pixels)
    if count == 0:
        raise ContractError(f"No tissue pixels in the {split} split")
    return total / count / 255


def save_mean_rgb(mean_rgb, path):
    with open(path, "w") as ff:
        json.dump(dict(mean_rgb=[float(value) for value in mean_rgb]), ff)


def load_mean_rgb(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as ff:
        return xp.asarray(json.load(ff)["mean_rgb"], dtype=xp.float64)


def jitter_hsv(patch, hue_shift=0.0, saturation_scale=1.0):
    """
    Shift hue (wrapping) and scale saturation (clamped to :code:`[0, 1]`).

    Parameters
    ----------
    patch: array_like
        8-bit RGB
    hue_shift: float
        Added to the hue in turns
    saturation_scale: float
        Multiplies the saturation

    Returns
    -------
    array_like
        8-bit RGB
    """
    if hue_shift == 0 and saturation_scale == 1:
        return patch
    hsv = rgb2hsv(patch)
    hsv[..., 0] = xp.mod(hsv[..., 0] + hue_shift, 1)
    hsv[..., 1] = xp.clip(hsv[..., 1] * saturation_scale, 0, 1)
    return xp.clip(xp.rint(hsv2rgb(hsv) * 255), 0, 255).astype(xp.uint8)


@autodoc
def augment(patch, rng, hue_range=0.05, saturation_range=(0.9, 1.1)):
    """
    Random right-angle rotation, flips and HSV jitter.

    Parameters
    ----------
    patch: array_like
        8-bit RGB with shape :code:`(h, w, 3)`
    {rng}
    hue_range: float
        Hue shifts are uniform in :code:`[-hue_range, hue_range]`
    saturation_range: tuple
        Saturation scales are uniform in this interval

    Returns
    -------
    array_like
        8-bit RGB
    """
    patch = xp.rot90(patch, k=int(rng.integers(4)), axes=(0, 1))
    if rng.random() < 0.5:
        patch = patch[:, ::-1]
    if rng.random() < 0.5:
        patch = patch[::-1]
    hue = rng.uniform(-hue_range, hue_range)
    saturation = rng.uniform(*saturation_range)
    return xp.ascontiguousarray(jitter_hsv(xp.ascontiguousarray(patch), hue, saturation))


def crop_patch(image, center, size):
    """
    Square crop centred on :code:`center`, mirror padded where it leaves the
    image.
    """
    height, width = image.shape[:2]
    row, col = center
    top = row - size // 2
    left = col - size // 2
    bottom, right = top + size, left + size
    crop = image[max(top, 0):min(bottom, height), max(left, 0):min(right, width)]
    pad = [(max(-top, 0), max(bottom - height, 0)), (max(-left, 0), max(right - width, 0))]
    if any(before or after for before, after in pad):
        pad += [(0, 0)] * (image.ndim - 2)
        crop = xp.pad(crop, pad, mode="symmetric")
    return crop


@dataclass
class Region:
    """
    An extra training region added without touching the annotations.

    Parameters
    ----------
    slide_index: int
        Index into :code:`PatchDataset.images`
    label: int
        Mask label value assigned to the region
    pixels: array_like
        Boolean raster the size of the slide
    """

    slide_index: int
    label: int
    pixels: np.ndarray = field(repr=False)


class PatchDataset:
    """
    In-memory images and masks from which patches are sampled.

    Parameters
    ----------
    images: list[array_like]
        8-bit RGB rasters
    masks: list[array_like]
        Label rasters aligned with the images
    classes: tuple
        For each output class, the mask labels it covers. Defaults to the
        three-class task, use :data:`BINARY` for benign versus cancer.
    """

    def __init__(self, images, masks, classes=THREE_CLASS):
        if len(images) != len(masks):
            raise ContractError(f"{len(images)} images but {len(masks)} masks")
        for image, mask in zip(images, masks):
            if image.shape[:2] != mask.shape:
                raise ShapeError("Image and mask differ", image.shape, mask.shape)
        self.images = list(images)
        self.masks = list(masks)
        self.classes = tuple(tuple(labels) for labels in classes)
        self.regions = list()
        self._index()

    @classmethod
    def from_slides(cls, dataset, slides, classes=THREE_CLASS):
        images = [dataset.load_image(slide) for slide in slides]
        masks = [dataset.load_mask(slide) for slide in slides]
        return cls(images, masks, classes=classes)

    @property
    def num_classes(self):
        return len(self.classes)

    def add_regions(self, regions):
        self.regions.extend(regions)
        self._index()

    def class_pixels(self, slide_index, cls):
        pixels = xp.isin(self.masks[slide_index], self.classes[cls])
        for region in self.regions:
            if region.slide_index == slide_index and region.label in self.classes[cls]:
                pixels = pixels | region.pixels
        return pixels

    def _index(self):
        self.counts = xp.zeros((self.num_classes, len(self.images)), dtype=xp.int64)
        self.boxes = dict()
        for cls in range(self.num_classes):
            for index in range(len(self.images)):
                pixels = self.class_pixels(index, cls)
                count = int(pixels.sum())
                self.counts[cls, index] = count
                if count:
                    rows = xp.flatnonzero(pixels.any(axis=1))
                    cols = xp.flatnonzero(pixels.any(axis=0))
                    self.boxes[cls, index] = (rows[0], rows[-1] + 1, cols[0], cols[-1] + 1)

    def pick_pixel(self, cls, rng, max_tries=10000):
        """
        A pixel drawn uniformly from every pixel of a class over all slides.
        """
        if self.counts[cls].sum() == 0:
            raise ContractError(f"No pixels of class {cls} to sample from")
        weights = self.counts[cls] / self.counts[cls].sum()
        index = int(rng.choice(len(self.images), p=weights))
        top, bottom, left, right = self.boxes[cls, index]
        for _ in range(max_tries):
            row = int(rng.integers(top, bottom))
            col = int(rng.integers(left, right))
            if self._covers(index, cls, row, col):
                return index, (row, col)
        pixels = xp.flatnonzero(self.class_pixels(index, cls))
        flat = int(pixels[rng.integers(len(pixels))])
        return index, divmod(flat, self.masks[index].shape[1])

    def _covers(self, index, cls, row, col):
        if self.masks[index][row, col] in self.classes[cls]:
            return True
        return any(
            region.slide_index == index
            and region.label in self.classes[cls]
            and region.pixels[row, col]
            for region in self.regions
        )


@autodoc
def sample_patch(dataset, cls, patch_size, rng):
    """
    A patch centred on a uniformly chosen pixel of one class.

    Parameters
    ----------
    dataset: PatchDataset
    cls: int
        The output class index
    patch_size: int
        The patch edge in pixels
    {rng}

    Returns
    -------
    patch: array_like
        8-bit RGB with shape :code:`(patch_size, patch_size, 3)`
    label: int
        :code:`cls`
    """
    index, center = dataset.pick_pixel(cls, rng)
    return crop_patch(dataset.images[index], center, patch_size), cls


@autodoc
def balanced_labels(batch_size, rng, num_classes=3):
    """
    Class labels for one mini-batch, the number per class is drawn from a
    uniform multinomial.

    Parameters
    ----------
    batch_size: int
    {rng}
    num_classes: int

    Returns
    -------
    array_like
    """
    counts = rng.multinomial(batch_size, xp.full(num_classes, 1 / num_classes))
    return rng.permutation(xp.repeat(xp.arange(num_classes), counts))


@autodoc
def class_balanced_batch(dataset, batch_size, patch_size, rng, augmentation=True):
    """
    Sample a class-balanced mini-batch of raw patches.

    Parameters
    ----------
    dataset: PatchDataset
    batch_size: int
    patch_size: int
    {rng}
    augmentation: bool
        Apply :func:`augment` to every patch

    Returns
    -------
    patches: array_like
        8-bit RGB with shape :code:`(batch_size, patch_size, patch_size, 3)`
    labels: array_like
    """
    labels = balanced_labels(batch_size, rng, dataset.num_classes)
    patches = list()
    for label in labels:
        patch, _ = sample_patch(dataset, int(label), patch_size, rng)
        if augmentation:
            patch = augment(patch, rng)
        patches.append(patch)
    return xp.stack(patches), labels


@autodoc
def validation_patches(dataset, n_per_class, patch_size, rng):
    """
    A fixed balanced patch set for scheduling, drawn without augmentation.

    Parameters
    ----------
    dataset: PatchDataset
    n_per_class: int
    patch_size: int
    {rng}

    Returns
    -------
    patches, labels: array_like
    """
    patches = list()
    labels = list()
    for cls in range(dataset.num_classes):
        if dataset.counts[cls].sum() == 0:
            logger.warning("Validation set has no pixels of class %d", cls)
            continue
        for _ in range(n_per_class):
            patch, label = sample_patch(dataset, cls, patch_size, rng)
            patches.append(patch)
            labels.append(label)
    return xp.stack(patches), xp.asarray(labels)