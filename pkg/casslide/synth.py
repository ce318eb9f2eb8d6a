"""
Synthetic slides for end-to-end runs without clinical data.

Every slide is a few overlapping tissue ellipses on a near-white background.
Tissue is pink stroma with sparse small benign glands. DCIS slides add
clusters of round lesions with a dark rim, IDC slides add large irregular
masses with the same nuclear texture but no rim, together with a smaller
amount of DCIS. Locally the two lesion types look alike, so telling them
apart needs the size and shape of the surrounding region.

Lesions are stamped until their share of the tissue reaches the configured
target, the last stamps shrinking to the remaining area so the targets are
met closely.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.draw import ellipse, polygon

from .constants import BACKGROUND, BENIGN, CLASS_NAMES, DCIS, IDC, IDC_MIN_AREA_UM2
from .data import SPLITS, Slide, SlideDataset, write_index
from .utils import ContractError, autodoc, rng

xp = np

logger = logging.getLogger(__name__)

__all__ = [
    "PALETTES",
    "SynthConfig",
    "assign_splits",
    "generate",
    "generate_slide",
    "value_noise",
]

PALETTES = {
    BACKGROUND: (246, 245, 247),
    BENIGN: (232, 168, 204),
    DCIS: (122, 62, 156),
    IDC: (116, 58, 150),
}
GLAND_COLOR = (196, 112, 170)
LUMEN_COLOR = (244, 226, 238)
RIM_COLOR = (66, 28, 96)


@dataclass(frozen=True)
class SynthConfig:
    """
    Synthetic dataset settings.

    Sizes are fractions of the image edge so textures scale with
    :code:`image_size`.

    Parameters
    ----------
    image_size: int
        default=1536
    n_slides_per_class: int
        default=40
    seed: int
    pixel_spacing_um: float
        default=1.0
    split_fractions: tuple
        Train, validation and test shares per class, default=(0.6, 0.15, 0.25)
    dcis_fraction: float
        Target DCIS share of the tissue on DCIS slides, default=0.12
    idc_fraction: float
        Target IDC share of the tissue on IDC slides, default=0.25
    idc_dcis_fraction: float
        Target DCIS share of the tissue on IDC slides, default=0.04
    gland_radius: tuple
        default=(0.006, 0.012)
    dcis_radius: tuple
        default=(0.025, 0.045)
    idc_radius: tuple
        Radius range of the first IDC mass, default=(0.12, 0.16)
    satellite_radius: tuple
        Radius range of further IDC masses, default=(0.04, 0.07)
    noise_scale: float
        Edge of one value noise cell, default=0.02
    """

    image_size: int = 1536
    n_slides_per_class: int = 40
    seed: int = 0
    pixel_spacing_um: float = 1.0
    split_fractions: tuple = (0.6, 0.15, 0.25)
    dcis_fraction: float = 0.12
    idc_fraction: float = 0.25
    idc_dcis_fraction: float = 0.04
    gland_radius: tuple = (0.006, 0.012)
    dcis_radius: tuple = (0.025, 0.045)
    idc_radius: tuple = (0.12, 0.16)
    satellite_radius: tuple = (0.04, 0.07)
    noise_scale: float = 0.02
    min_idc_area_um2: float = IDC_MIN_AREA_UM2

    def __post_init__(self):
        if self.n_slides_per_class < 1:
            raise ValueError("At least one slide per class is needed")
        if len(self.split_fractions) != len(SPLITS) or not np.isclose(
            sum(self.split_fractions), 1
        ):
            raise ValueError(f"Split fractions must be three shares summing to 1, "
                             f"got {self.split_fractions}")
        for name in ("dcis_fraction", "idc_fraction", "idc_dcis_fraction"):
            if not 0 < getattr(self, name) < 0.5:
                raise ValueError(f"{name} must lie in (0, 0.5)")
        if self.pixel_spacing_um <= 0:
            raise ValueError("pixel_spacing_um must be positive")
        for name in ("split_fractions", "gland_radius", "dcis_radius", "idc_radius",
                     "satellite_radius"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.min_idc_radius > self.max_idc_radius:
            raise ContractError(
                f"A {self.image_size} pixel slide at {self.pixel_spacing_um} um/pixel "
                f"cannot hold an IDC mass of {self.min_idc_area_um2} um^2"
            )

    @property
    def tissue_axes(self):
        return 0.3 * self.image_size, 0.42 * self.image_size

    @property
    def min_idc_radius(self):
        # irregular masses keep at least 70% of the nominal radius
        area = 2 * self.min_idc_area_um2 / self.pixel_spacing_um**2
        return float(np.sqrt(area / (np.pi * 0.49)))

    @property
    def max_idc_radius(self):
        return 0.6 * self.tissue_axes[0]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def value_noise(shape, scale, rng):
    """
    Smooth noise in :code:`[0, 1]` from bilinearly upsampled uniform noise.

    Parameters
    ----------
    shape: tuple
    scale: float
        Edge of one coarse noise cell in pixels
    rng: numpy.random.Generator
    """
    scale = max(float(scale), 1.0)
    coarse = rng.random(tuple(int(np.ceil(size / scale)) + 1 for size in shape))
    fine = ndimage.zoom(coarse, scale, order=1, mode="nearest")
    return fine[: shape[0], : shape[1]]


def _disc(shape, center, radius):
    rows, cols = ellipse(center[0], center[1], radius, radius, shape=shape)
    pixels = xp.zeros(shape, dtype=bool)
    pixels[rows, cols] = True
    return pixels


def _irregular(shape, center, radius, generator, vertices=48):
    angles = xp.linspace(0, 2 * np.pi, vertices, endpoint=False)
    harmonics = xp.zeros(vertices)
    for order in range(2, 6):
        harmonics += generator.normal() * xp.cos(order * angles + generator.uniform(0, 2 * np.pi))
    radii = radius * (1 + 0.3 * xp.tanh(harmonics / 2))
    rows, cols = polygon(
        center[0] + radii * xp.sin(angles), center[1] + radii * xp.cos(angles), shape=shape
    )
    pixels = xp.zeros(shape, dtype=bool)
    pixels[rows, cols] = True
    return pixels


def _tissue(config, generator):
    size = config.image_size
    shape = (size, size)
    tissue = xp.zeros(shape, dtype=bool)
    minor, major = config.tissue_axes
    center = size / 2 + generator.uniform(-0.03, 0.03, 2) * size
    rows, cols = ellipse(
        center[0], center[1], major, minor, shape=shape,
        rotation=generator.uniform(-np.pi / 6, np.pi / 6),
    )
    tissue[rows, cols] = True
    for _ in range(generator.integers(0, 3)):
        extra = center + generator.uniform(-0.25, 0.25, 2) * size
        axes = generator.uniform(0.1, 0.2, 2) * size
        rows, cols = ellipse(extra[0], extra[1], axes[0], axes[1], shape=shape,
                             rotation=generator.uniform(0, np.pi))
        tissue[rows, cols] = True
    return tissue, center


def _random_cell(pixels, generator):
    cells = xp.argwhere(pixels)
    return cells[generator.integers(len(cells))]


def _stamp(mask, rim, tissue, label, target, radius_range, generator, config,
           centers=None, irregular=False, max_stamps=2000):
    size = config.image_size
    goal = target * tissue.sum()
    allowed = tissue & (mask == BENIGN)
    for _ in range(max_stamps):
        remaining = goal - (mask == label).sum()
        if remaining <= 0:
            return
        if centers is None and not allowed.any():
            break
        radius = generator.uniform(*radius_range) * size
        radius = max(min(radius, np.sqrt(remaining / np.pi)), 2.0)
        if centers is not None:
            anchor = centers[generator.integers(len(centers))]
            center = anchor + generator.normal(0, 0.06 * size, 2)
        else:
            center = _random_cell(allowed, generator)
        if irregular:
            pixels = _irregular(mask.shape, center, radius, generator)
        else:
            pixels = _disc(mask.shape, center, radius)
            inner = _disc(mask.shape, center, 0.78 * radius)
            rim |= pixels & ~inner & allowed
        mask[pixels & allowed] = label
        allowed &= mask == BENIGN
    logger.warning("Stopped stamping %s after %d lesions", CLASS_NAMES[label - 1], max_stamps)


def _paint(mask, rim, config, generator):
    size = config.image_size
    shape = mask.shape
    coarse = value_noise(shape, config.noise_scale * size, generator)
    fine = value_noise(shape, 2.0, generator)
    image = xp.zeros(shape + (3,), dtype=xp.float64)
    for label, color in PALETTES.items():
        image[mask == label] = color
    lesion = (mask == DCIS) | (mask == IDC)
    benign = mask == BENIGN
    n_glands = int(benign.sum() / (np.pi * (config.gland_radius[1] * size) ** 2) * 0.08)
    for _ in range(n_glands):
        center = _random_cell(benign, generator)
        radius = max(generator.uniform(*config.gland_radius) * size, 1.5)
        gland = _disc(shape, center, radius) & benign
        lumen = _disc(shape, center, 0.5 * radius) & benign
        image[gland] = GLAND_COLOR
        image[lumen] = LUMEN_COLOR
    image[rim] = RIM_COLOR
    tissue = mask != BACKGROUND
    shading = 0.85 + 0.25 * coarse
    image[tissue] *= shading[tissue, None]
    texture = 0.7 + 0.6 * fine
    image[lesion] *= texture[lesion, None]
    image[~tissue] += (fine[~tissue, None] - 0.5) * 4
    return xp.clip(xp.round(image), 0, 255).astype(xp.uint8)


@autodoc
def generate_slide(config, label, index):
    """
    One synthetic slide.

    Parameters
    ----------
    config: SynthConfig
    label: int
        The slide class index, 0 benign, 1 DCIS or 2 IDC
    index: int
        The slide number, selects the random stream

    Returns
    -------
    image: array_like
        8-bit RGB raster
    mask: array_like
        8-bit label raster
    """
    generator = rng(config.seed, "synth", index)
    tissue, center = _tissue(config, generator)
    mask = xp.where(tissue, BENIGN, BACKGROUND).astype(xp.uint8)
    rim = xp.zeros(tissue.shape, dtype=bool)
    if label + 1 == IDC:
        low, high = config.idc_radius
        radius = xp.clip(
            generator.uniform(low, high) * config.image_size,
            config.min_idc_radius, config.max_idc_radius,
        )
        mass = _irregular(tissue.shape, center, radius, generator) & tissue
        mask[mass] = IDC
        _stamp(mask, rim, tissue, IDC, config.idc_fraction, config.satellite_radius,
               generator, config, irregular=True)
        _stamp(mask, rim, tissue, DCIS, config.idc_dcis_fraction, config.dcis_radius,
               generator, config)
    elif label + 1 == DCIS:
        allowed = tissue.copy()
        centers = [_random_cell(allowed, generator) for _ in range(generator.integers(1, 4))]
        _stamp(mask, rim, tissue, DCIS, config.dcis_fraction, config.dcis_radius,
               generator, config, centers=centers)
    rim &= mask == DCIS
    return _paint(mask, rim, config, generator), mask


def assign_splits(n_slides, fractions, rng):
    """
    Split names for one class, in slide order.

    The validation and test counts are rounded and the training split takes
    the rest.
    """
    n_val = int(round(fractions[1] * n_slides))
    n_test = int(round(fractions[2] * n_slides))
    n_train = n_slides - n_val - n_test
    names = xp.array(["train"] * n_train + ["val"] * n_val + ["test"] * n_test)
    return names[rng.permutation(n_slides)].tolist()


@autodoc
def generate(config, root, threads=1):
    """
    Write a synthetic dataset directory.

    Parameters
    ----------
    config: SynthConfig
    root: str
        Output directory, created if needed
    {threads}

    Returns
    -------
    SlideDataset
    """
    os.makedirs(root, exist_ok=True)
    jobs = list()
    splits = list()
    for label in range(len(CLASS_NAMES)):
        start = label * config.n_slides_per_class
        jobs.extend(
            (label, index) for index in range(start, start + config.n_slides_per_class)
        )
        splits.extend(
            assign_splits(config.n_slides_per_class, config.split_fractions,
                          rng(config.seed, "split", label))
        )

    def write(job):
        label, index = job
        image, mask = generate_slide(config, label, index)
        slide = Slide(f"{index:04d}", f"image_{index:04d}.png", f"mask_{index:04d}.png",
                      splits[index], label)
        Image.fromarray(image).save(os.path.join(root, slide.image))
        Image.fromarray(mask).save(os.path.join(root, slide.mask))
        logger.debug("Wrote slide %s (%s)", slide.slide_id, CLASS_NAMES[label])
        return slide

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            slides = list(pool.map(write, jobs))
    else:
        slides = [write(job) for job in jobs]
    write_index(root, slides, pixel_spacing_um=config.pixel_spacing_um)
    logger.info("Generated %d synthetic slides in %s", len(slides), root)
    return SlideDataset(root)
