"""
Context-aware stacked network and dense prediction.

A trainable fully-convolutional top network is stacked on the last
convolutional layer of a frozen wide residual network. The base runs in
inference mode without keeping activations, so training memory depends on
the top network only. Whole images are labelled by sliding the stacked
network over them with a fixed stride, every window is evaluated
independently and becomes one cell of a :class:`ProbabilityMap`.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image
from tqdm import tqdm

from . import nn
from .constants import (
    BACKGROUND_COLOR,
    CLASS_COLORS,
    DEFAULT_STRIDE,
    DOWNSAMPLING,
    NUM_CLASSES,
)
from .data import preprocess, tissue_mask
from .utils import ContractError, ShapeError, autodoc, rng
from .wrn import WideResNet, WrnConfig, build_wrn, extract_features

xp = np

logger = logging.getLogger(__name__)

PROBMAP_FORMAT = "casslide-probmap"

__all__ = [
    "ProbabilityMap",
    "StackedConfig",
    "StackedNetwork",
    "build_stacked",
    "dense_predict",
    "grid_shape",
    "load_stacked",
    "predict_slide",
    "predict_window",
    "render_heatmap",
    "save_stacked",
    "tissue_grid",
]


@dataclass(frozen=True)
class StackedConfig:
    """
    Configuration of the stacked network and its dense prediction.

    Parameters
    ----------
    training_patch_size: int
        The window edge in pixels, 512, 768 or 1024 for full size runs,
        default=768
    window_stride: int
        The dense prediction stride in pixels, default=224
    num_classes: int
        default=3
    top_widths: tuple
        Output channels of the two convolutional units, default=(256, 256)
    """

    training_patch_size: int = 768
    window_stride: int = DEFAULT_STRIDE
    num_classes: int = NUM_CLASSES
    top_widths: tuple = (256, 256)

    def __post_init__(self):
        if self.training_patch_size % DOWNSAMPLING:
            raise ValueError(
                f"training_patch_size must be divisible by {DOWNSAMPLING}, "
                f"got {self.training_patch_size}"
            )
        if self.window_stride < 1:
            raise ValueError(f"window_stride must be positive, got {self.window_stride}")
        object.__setattr__(self, "top_widths", tuple(self.top_widths))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


class StackedNetwork:
    """
    A frozen :class:`casslide.wrn.WideResNet` feature extractor followed by
    a trainable top network.

    Exposes the same training interface as :class:`casslide.nn.Sequential`
    so the optimizer and training loop treat both networks alike.
    """

    name = "stacked"

    def __init__(self, base, top, config):
        self.base = base
        self.top = top
        self.config = config

    def forward(self, input, train=False, cache=True):
        features = extract_features(self.base, input, train=False, cache=False)
        return self.top.forward(features, train=train, cache=cache)

    def backward(self, dout, need_input_grad=False):
        return self.top.backward(dout, need_input_grad=False)

    def trainable_parameters(self):
        for name, layer, key in self.top.trainable_parameters():
            yield f"top.{name}", layer, key

    def gradients(self):
        return {name: layer.grads[key] for name, layer, key in self.trainable_parameters()}

    def clear_cache(self):
        self.base.clear_cache()
        self.top.clear_cache()

    def cached_bytes(self):
        return self.base.cached_bytes() + self.top.cached_bytes()

    def n_parameters(self):
        return self.base.n_parameters() + self.top.n_parameters()

    def spec(self):
        return dict(base=self.base.spec(), top=self.top.spec())

    def tensors(self):
        for name, value in self.base.tensors():
            yield f"base.{name}", value
        for name, value in self.top.tensors():
            yield f"top.{name}", value


def _vgg_unit(in_channels, out_channels, generator):
    return [
        nn.Conv2d(in_channels, out_channels, 3, rng=generator),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(),
        nn.Conv2d(out_channels, out_channels, 3, rng=generator),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(),
        nn.Conv2d(out_channels, out_channels, 3, stride=2, rng=generator),
    ]


def build_stacked(base, config=None, seed=0):
    """
    Stack a trainable top network on a frozen base.

    The top network is two VGG-style units (two 3x3 conv, BN, ReLU then a
    stride-2 3x3 conv), one residual block, global average pooling and a
    1x1 convolution classifier.

    Parameters
    ----------
    base: WideResNet
        A trained base with every parameter frozen
    config: StackedConfig, optional
    seed: int
        The root seed, top weights come from its :code:`"init"` stream

    Returns
    -------
    StackedNetwork
    """
    config = config or StackedConfig()
    if not isinstance(base, WideResNet):
        raise ContractError("The base must be a wide residual network")
    if not base.frozen:
        raise ContractError("The base network must be frozen before stacking")
    if config.training_patch_size < base.config.patch_size:
        raise ContractError(
            f"Window {config.training_patch_size} is smaller than the base patch "
            f"size {base.config.patch_size}"
        )
    generator = rng(seed, "init", 1)
    feature_channels = base.config.feature_channels
    in_channels = feature_channels
    layers = list()
    for width in config.top_widths:
        layers.extend(_vgg_unit(in_channels, width, generator))
        in_channels = width
    layers.append(nn.ResidualBlock(in_channels, in_channels, rng=generator))
    layers.append(nn.GlobalAvgPool())
    layers.append(nn.Classifier(in_channels, config.num_classes, rng=generator))
    features = config.training_patch_size // DOWNSAMPLING
    top = nn.Sequential(
        layers, input_shape=(1, feature_channels, features, features), name="stacked-top"
    )
    logger.debug("Stacked top network with %d parameters on a %d pixel window",
                 top.n_parameters(), config.training_patch_size)
    return StackedNetwork(base, top, config)


@autodoc
def predict_window(stacked, window):
    """
    Class probabilities for one or more windows.

    Parameters
    ----------
    stacked: StackedNetwork
    window: array_like
        Preprocessed windows with shape :code:`(n, 3, s, s)` or
        :code:`(3, s, s)` where :code:`s` is the training patch size

    Returns
    -------
    array_like
        Probabilities over (benign, DCIS, IDC) with shape :code:`(n, 3)`
    """
    window = xp.asarray(window)
    if window.ndim == 3:
        window = window[None]
    size = stacked.config.training_patch_size
    if window.ndim != 4 or window.shape[2:] != (size, size):
        raise ShapeError(f"Windows must be {size}x{size}", window.shape)
    logits = stacked.forward(window, train=False, cache=False)
    return nn.softmax(logits)[:, :, 0, 0]


@dataclass
class ProbabilityMap:
    """
    A coarse grid of class probabilities from dense prediction.

    Parameters
    ----------
    grid: array_like
        Probabilities with shape :code:`(rows, cols, 3)`
    window: int
        The window edge in pixels
    stride: int
        The window stride in pixels
    pixel_spacing_um: float
        The physical edge of one source pixel in micrometers
    origin: tuple
        The top-left pixel of the first window
    background: array_like
        Boolean :code:`(rows, cols)` grid, :code:`True` where the window was
        skipped as background
    """

    grid: np.ndarray
    window: int
    stride: int
    pixel_spacing_um: float = 1.0
    origin: tuple = (0, 0)
    background: np.ndarray = field(default=None)

    def __post_init__(self):
        self.grid = xp.asarray(self.grid)
        if self.grid.ndim != 3 or self.grid.shape[2] != NUM_CLASSES:
            raise ShapeError("Probability grid must be (rows, cols, 3)", self.grid.shape)
        if self.background is None:
            self.background = xp.zeros(self.grid.shape[:2], dtype=bool)
        self.background = xp.asarray(self.background, dtype=bool)
        if self.background.shape != self.grid.shape[:2]:
            raise ShapeError("Background flags do not match the grid",
                             self.background.shape, self.grid.shape)
        self.origin = tuple(self.origin)

    @property
    def shape(self):
        return self.grid.shape[:2]

    @property
    def tissue(self):
        return ~self.background

    @property
    def cell_spacing_um(self):
        return self.stride * self.pixel_spacing_um

    def to_bytes(self):
        rows, cols = self.shape
        header = dict(
            format=PROBMAP_FORMAT,
            rows=rows,
            cols=cols,
            window=self.window,
            stride=self.stride,
            origin=list(self.origin),
            pixel_spacing_um=self.pixel_spacing_um,
            background=self.background.astype(int).reshape(-1).tolist(),
        )
        return (
            json.dumps(header, sort_keys=True).encode("utf-8")
            + b"\n"
            + xp.asarray(self.grid, dtype="<f4").tobytes()
        )

    def save(self, path):
        with open(path, "wb") as ff:
            ff.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data):
        newline = data.index(b"\n")
        header = json.loads(data[:newline].decode("utf-8"))
        if header.get("format") != PROBMAP_FORMAT:
            raise ContractError("Not a probability map file")
        rows, cols = header["rows"], header["cols"]
        grid = xp.frombuffer(data, dtype="<f4", offset=newline + 1)
        if grid.size != rows * cols * NUM_CLASSES:
            raise ContractError(f"Expected {rows * cols} cells, found {grid.size // 3}")
        return cls(
            grid=grid.reshape(rows, cols, NUM_CLASSES).astype(xp.float32),
            window=header["window"],
            stride=header["stride"],
            pixel_spacing_um=header["pixel_spacing_um"],
            origin=tuple(header["origin"]),
            background=xp.asarray(header["background"], dtype=bool).reshape(rows, cols),
        )

    @classmethod
    def load(cls, path):
        with open(path, "rb") as ff:
            return cls.from_bytes(ff.read())


def grid_shape(height, width, window, stride):
    """
    Number of window rows and columns anchored at the origin, remainders
    smaller than one stride are dropped.
    """
    if height < window or width < window:
        raise ContractError(f"Image {height}x{width} is smaller than the {window} window")
    return (height - window) // stride + 1, (width - window) // stride + 1


@autodoc
def tissue_grid(tissue, window, stride, min_fraction=0.5):
    """
    Per-cell tissue flags for a dense prediction grid.

    A cell is tissue when at least :code:`min_fraction` of the
    :code:`stride x stride` block centred on its window is tissue.

    Parameters
    ----------
    tissue: array_like
        Boolean pixel raster
    {window}
    {stride}
    min_fraction: float
        default=0.5

    Returns
    -------
    array_like
        Boolean :code:`(rows, cols)` grid
    """
    tissue = xp.asarray(tissue, dtype=bool)
    rows, cols = grid_shape(*tissue.shape, window, stride)
    offset = window // 2 - stride // 2
    flags = xp.zeros((rows, cols), dtype=bool)
    for ii in range(rows):
        top = max(ii * stride + offset, 0)
        for jj in range(cols):
            left = max(jj * stride + offset, 0)
            block = tissue[top:top + stride, left:left + stride]
            flags[ii, jj] = block.size > 0 and block.mean() >= min_fraction
    return flags


@autodoc
def dense_predict(stacked, image, config=None, tissue=None, pixel_spacing_um=1.0,
                  threads=1, progress=False):
    """
    Slide the stacked network over an image.

    Cell :code:`(i, j)` is :func:`predict_window` on the window whose top-left
    pixel is :code:`(i * stride, j * stride)`. Windows are evaluated one at a
    time so threaded and sequential runs give identical maps.

    Parameters
    ----------
    stacked: StackedNetwork
    image: array_like
        A preprocessed image with shape :code:`(3, H, W)`
    config: StackedConfig, optional
        Defaults to the configuration of :code:`stacked`
    tissue: array_like, optional
        Boolean :code:`(rows, cols)` grid from :func:`tissue_grid`, cells
        without tissue are skipped and assigned probability one for benign
    pixel_spacing_um: float
        The physical size of one source pixel
    {threads}
    progress: bool
        Show a progress bar

    Returns
    -------
    ProbabilityMap
    """
    config = config or stacked.config
    image = xp.asarray(image)
    if image.ndim == 4 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError("Expected a (3, H, W) image", image.shape)
    window = config.training_patch_size
    stride = config.window_stride
    rows, cols = grid_shape(image.shape[1], image.shape[2], window, stride)
    if tissue is None:
        tissue = xp.ones((rows, cols), dtype=bool)
    elif tissue.shape != (rows, cols):
        raise ShapeError("Tissue grid does not match the window grid", tissue.shape, (rows, cols))
    grid = xp.zeros((rows, cols, NUM_CLASSES), dtype=xp.float32)
    grid[~tissue, 0] = 1
    cells = [(ii, jj) for ii in range(rows) for jj in range(cols) if tissue[ii, jj]]
    skipped = rows * cols - len(cells)
    if skipped:
        logger.debug("Skipping %d background windows", skipped)

    def evaluate(cell):
        ii, jj = cell
        top, left = ii * stride, jj * stride
        crop = image[:, top:top + window, left:left + window]
        return predict_window(stacked, crop)[0]

    disable = not progress
    if threads <= 1:
        results = map(evaluate, cells)
        for cell, probabilities in tqdm(zip(cells, results), total=len(cells), disable=disable):
            grid[cell] = probabilities
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = pool.map(evaluate, cells)
            for cell, probabilities in tqdm(zip(cells, results), total=len(cells),
                                            disable=disable):
                grid[cell] = probabilities
    return ProbabilityMap(
        grid=grid,
        window=window,
        stride=stride,
        pixel_spacing_um=pixel_spacing_um,
        background=~tissue,
    )


@autodoc
def predict_slide(stacked, image, mean_rgb, pixel_spacing_um=1.0, threads=1,
                  min_tissue_fraction=0.5, progress=False):
    """
    Preprocess an RGB slide, detect tissue and run :func:`dense_predict`.

    Parameters
    ----------
    stacked: StackedNetwork
    {image}
    mean_rgb: array_like
        The training set mean RGB value in :code:`[0, 1]`
    pixel_spacing_um: float
        The physical size of one source pixel
    {threads}

    Returns
    -------
    ProbabilityMap
    """
    config = stacked.config
    tissue = tissue_grid(
        tissue_mask(image), config.training_patch_size, config.window_stride,
        min_fraction=min_tissue_fraction,
    )
    tensor = preprocess(image, mean_rgb)
    return dense_predict(
        stacked, tensor, config, tissue=tissue, pixel_spacing_um=pixel_spacing_um,
        threads=threads, progress=progress,
    )


def render_heatmap(probability_map, path=None):
    """
    Colour every grid cell by its most probable class.

    Benign is green, DCIS blue, IDC red and background white, one image
    pixel per cell.

    Returns
    -------
    PIL.Image.Image
    """
    labels = xp.argmax(probability_map.grid, axis=-1)
    palette = xp.asarray(CLASS_COLORS, dtype=xp.uint8)
    pixels = palette[labels]
    pixels[probability_map.background] = BACKGROUND_COLOR
    image = Image.fromarray(pixels)
    if path is not None:
        image.save(path)
    return image


def save_stacked(stacked, path):
    meta = dict(
        model="stacked",
        base_config=stacked.base.config.to_dict(),
        config=stacked.config.to_dict(),
    )
    nn.save_weights(stacked, path, meta=meta)


def load_stacked(path):
    """
    Rebuild a stacked network from a weight file, the base is frozen.
    """
    header, _ = nn.read_weights(path)
    meta = header.get("meta", dict())
    if meta.get("model") != "stacked":
        raise ContractError(f"{path} does not contain a stacked network")
    base = build_wrn(WrnConfig.from_dict(meta["base_config"])).freeze()
    stacked = build_stacked(base, StackedConfig.from_dict(meta["config"]))
    nn.load_weights(stacked, path)
    return stacked
