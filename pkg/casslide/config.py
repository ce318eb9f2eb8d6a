"""
Run configuration shared by the command line stages.

A :class:`RunConfig` is read from a JSON file, overridden by command line
flags and written next to the outputs of every command as
:code:`run_config.json`, so each stage can be re-run from files alone.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .constants import DEFAULT_STRIDE
from .forest import ForestConfig
from .synth import SynthConfig
from .training import TrainConfig
from .utils import ContractError, env_threads
from .wrn import WrnConfig

logger = logging.getLogger(__name__)

CONFIG_NAME = "run_config.json"
MEAN_RGB_NAME = "mean_rgb.json"
WRN_NAME = "wrn.weights"
MINED_WRN_NAME = "wrn_mined.weights"
MINED_REGIONS_NAME = "mined_regions.json"
FEATURES_NAME = "features.csv"
MAPS_DIRECTORY = "maps"

__all__ = [
    "CONFIG_NAME",
    "RunConfig",
    "archive_config",
    "build_section",
    "load_config",
]


@dataclass(frozen=True)
class RunConfig:
    """
    Everything a pipeline run depends on.

    Parameters
    ----------
    dataset: str
        The dataset directory
    models: str
        Directory for weights, mean RGB values, mined regions and forests
    outputs: str
        Directory for probability maps, features, classifications and reports
    seed: int
        The root seed of every random stream
    threads: int, optional
        Worker threads, falls back to :code:`CAS_PIPELINE_THREADS` then 1
    deterministic: bool
        Force a single thread and no batch prefetching
    window: int
        The stacked network window, default=768
    stride: int
        The dense prediction stride, default=224
    wrn: WrnConfig
    patch_training: dict
        :class:`casslide.training.TrainConfig` overrides for the patch network
    stacked_training: dict
        :class:`casslide.training.TrainConfig` overrides for the stacked network
    forest: ForestConfig
    synth: SynthConfig
    """

    dataset: str = "dataset"
    models: str = "models"
    outputs: str = "outputs"
    seed: int = 0
    threads: int = None
    deterministic: bool = False
    window: int = 768
    stride: int = DEFAULT_STRIDE
    wrn: WrnConfig = field(default_factory=WrnConfig)
    patch_training: dict = field(default_factory=dict)
    stacked_training: dict = field(default_factory=dict)
    forest: ForestConfig = field(default_factory=ForestConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @property
    def n_threads(self):
        if self.deterministic:
            return 1
        if self.threads is not None:
            return max(int(self.threads), 1)
        return env_threads()

    def patch_train_config(self):
        options = dict(seed=self.seed, prefetch=not self.deterministic)
        options.update(self.patch_training)
        return TrainConfig.for_wrn(**options)

    def stacked_train_config(self):
        options = dict(seed=self.seed, prefetch=not self.deterministic)
        options.update(self.stacked_training)
        return TrainConfig.for_stacked(self.window, **options)

    def forest_config(self, **kwargs):
        return replace(self.forest, seed=self.seed, **kwargs)

    def path(self, kind, *names):
        return os.path.join(getattr(self, kind), *names)

    def stacked_name(self):
        return f"stacked_{self.window}.weights"

    def update(self, **overrides):
        """
        A copy with every override that is not :code:`None` applied.
        """
        return replace(self, **{key: value for key, value in overrides.items()
                                if value is not None})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {item.name for item in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"Unknown configuration keys: {sorted(unknown)}")
        data = dict(data)
        nested = dict(wrn=WrnConfig, forest=ForestConfig, synth=SynthConfig)
        for key, kind in nested.items():
            if key in data and isinstance(data[key], dict):
                data[key] = build_section(kind, data[key], key)
        for key in ("patch_training", "stacked_training"):
            names = {item.name for item in fields(TrainConfig)}
            unknown = set(data.get(key, dict())) - names
            if unknown:
                raise ContractError(f"Unknown {key} keys: {sorted(unknown)}")
        stride = data.get("stride", DEFAULT_STRIDE)
        if not isinstance(stride, int) or stride < 1:
            raise ContractError(f"stride must be a positive integer, got {stride!r}")
        return cls(**data)


def build_section(kind, data, name):
    """
    Build one nested configuration, invalid values become :class:`ContractError`.
    """
    try:
        return kind(**data)
    except (TypeError, ValueError) as error:
        raise ContractError(f"Invalid {name} configuration: {error}") from error


def load_config(path=None):
    """
    Read a :class:`RunConfig` from JSON, the defaults when no path is given.
    """
    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as ff:
        try:
            data = json.load(ff)
        except json.JSONDecodeError as error:
            raise ContractError(f"{path} is not valid JSON: {error}") from error
    return RunConfig.from_dict(data)


def archive_config(config, directory):
    """
    Write the effective configuration next to a command's outputs.
    """
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, CONFIG_NAME)
    with open(path, "w") as ff:
        json.dump(config.to_dict(), ff, indent=2, sort_keys=True)
    logger.debug("Archived configuration to %s", path)
    return path
