"""
The wide residual patch classifier.

The network is an initial stride-2 3x3 convolution, three groups of
pre-activation residual blocks whose first block downsamples by two, global
average pooling and a 1x1 convolution classifier. The total downsampling
factor is 16, so a 224 pixel patch gives a 14x14 map at the last
convolutional layer.

Because every layer is convolutional, the same weights accept any input
whose edge is a multiple of 16 and at least the training patch size, which
is how the stacked network reuses them on larger windows.
"""

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .constants import DOWNSAMPLING, NUM_CLASSES
from .utils import ContractError, ShapeError, autodoc, rng

xp = np

logger = logging.getLogger(__name__)

__all__ = [
    "WideResNet",
    "WrnConfig",
    "build_wrn",
    "extract_features",
    "load_wrn",
    "parameter_count",
    "predict_proba",
    "save_wrn",
]


@dataclass(frozen=True)
class WrnConfig:
    """
    Hyperparameters of the wide residual network.

    Parameters
    ----------
    n_blocks_per_group: int
        The number of residual blocks per group (N), default=4
    width_multiplier: int
        The widening factor (K), default=2
    num_classes: int
        3 for benign/DCIS/IDC or 2 for benign/cancer, default=3
    base_widths: tuple
        Group widths before widening, default=(16, 32, 64)
    initial_width: int
        Output channels of the first convolution, default=32
    patch_size: int
        The training patch edge, also the smallest accepted input, default=224
    """

    n_blocks_per_group: int = 4
    width_multiplier: int = 2
    num_classes: int = NUM_CLASSES
    base_widths: tuple = (16, 32, 64)
    initial_width: int = 32
    patch_size: int = 224

    def __post_init__(self):
        if self.n_blocks_per_group < 1 or self.width_multiplier < 1:
            raise ValueError(
                f"N and K must be positive, got N={self.n_blocks_per_group}, "
                f"K={self.width_multiplier}"
            )
        if len(self.base_widths) != 3:
            raise ValueError(f"Exactly three groups are needed, got {self.base_widths}")
        if self.num_classes not in (2, 3):
            raise ValueError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if self.patch_size % DOWNSAMPLING:
            raise ValueError(f"patch_size must be a multiple of {DOWNSAMPLING}")
        object.__setattr__(self, "base_widths", tuple(self.base_widths))

    @property
    def widths(self):
        return tuple(width * self.width_multiplier for width in self.base_widths)

    @property
    def feature_channels(self):
        return self.widths[-1]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


class WideResNet(nn.Sequential):
    """
    A :class:`casslide.nn.Sequential` that remembers its configuration.

    The last two layers are the pooling and classifier, everything before
    them is the feature extractor.
    """

    def __init__(self, layers, config):
        self.config = config
        super().__init__(
            layers, input_shape=(1, 3, config.patch_size, config.patch_size), name="wrn"
        )

    @property
    def features(self):
        return nn.Sequential(self.layers[:-2], name="wrn-features")

    @property
    def head(self):
        return nn.Sequential(self.layers[-2:], name="wrn-head")


def build_wrn(config=None, seed=0):
    """
    Build the wide residual network with He initialized convolutions.

    Parameters
    ----------
    config: WrnConfig, optional
        Defaults to WRN-4-2 with three classes
    seed: int
        The root seed, weights are drawn from its :code:`"init"` stream

    Returns
    -------
    WideResNet
    """
    config = config or WrnConfig()
    generator = rng(seed, "init", 0)
    layers = [nn.Conv2d(3, config.initial_width, 3, stride=2, rng=generator)]
    in_channels = config.initial_width
    for width in config.widths:
        for block in range(config.n_blocks_per_group):
            layers.append(
                nn.ResidualBlock(
                    in_channels,
                    width,
                    stride=2 if block == 0 else 1,
                    rng=generator,
                    projection=block == 0,
                )
            )
            in_channels = width
    layers.append(nn.GlobalAvgPool())
    layers.append(nn.Classifier(in_channels, config.num_classes, rng=generator))
    network = WideResNet(layers, config)
    logger.debug("Built WRN-%d-%d with %d parameters", config.n_blocks_per_group,
                 config.width_multiplier, network.n_parameters())
    return network


def parameter_count(config):
    """
    Closed-form number of parameters of :func:`build_wrn`.
    """
    count = 3 * config.initial_width * 9
    in_channels = config.initial_width
    for width in config.widths:
        for block in range(config.n_blocks_per_group):
            count += 2 * in_channels + in_channels * width * 9
            count += 2 * width + width * width * 9
            if block == 0:
                count += in_channels * width
            in_channels = width
    return count + in_channels * config.num_classes + config.num_classes


def _check_input(network, input):
    input = xp.asarray(input)
    if input.ndim != 4 or input.shape[1] != 3:
        raise ShapeError("Expected an (n, 3, h, w) input", input.shape)
    minimum = network.config.patch_size
    height, width = input.shape[2:]
    if height < minimum or width < minimum:
        raise ContractError(
            f"Input {height}x{width} is smaller than the {minimum}x{minimum} patch size"
        )
    if height % DOWNSAMPLING or width % DOWNSAMPLING:
        raise ContractError(
            f"Input {height}x{width} is not a multiple of {DOWNSAMPLING}"
        )
    return input


@autodoc
def extract_features(network, input, train=False, cache=False):
    """
    Activations of the last convolutional layer.

    The classifier head is not evaluated. For an :code:`s x s` input the
    output has spatial size :code:`s / 16`.

    Parameters
    ----------
    {network}
    input: array_like
        Preprocessed patches with shape :code:`(n, 3, s, s)`
    train: bool
        Use batch statistics instead of running statistics
    cache: bool
        Keep activations for a backward pass

    Returns
    -------
    array_like
        Features with shape :code:`(n, C, s / 16, s / 16)`
    """
    input = _check_input(network, input)
    return network.features.forward(input, train=train, cache=cache)


@autodoc
def predict_proba(network, input):
    """
    Class probabilities for a batch of patches in inference mode.

    Parameters
    ----------
    {network}
    input: array_like
        Preprocessed patches with shape :code:`(n, 3, s, s)`

    Returns
    -------
    array_like
        Probabilities with shape :code:`(n, num_classes)`
    """
    input = _check_input(network, input)
    logits = network.forward(input, train=False, cache=False)
    return nn.softmax(logits)[:, :, 0, 0]


def save_wrn(network, path):
    nn.save_weights(network, path, meta=dict(model="wrn", config=network.config.to_dict()))


def load_wrn(path):
    """
    Rebuild a network from the configuration stored in a weight file and
    load its tensors.
    """
    header, _ = nn.read_weights(path)
    meta = header.get("meta", dict())
    if meta.get("model") != "wrn":
        raise ContractError(f"{path} does not contain a wide residual network")
    network = build_wrn(WrnConfig.from_dict(meta["config"]))
    nn.load_weights(network, path)
    return network
