"""
Helper functions shared across the pipeline that are not specific to any one
stage: docstring formatting, numeric precision, random streams, logging and
the exception types used to signal contract violations.
"""

import hashlib
import logging
import os

import numpy as np

xp = np

_docstrings_ = dict(
    image="""image: array_like
        An 8-bit RGB raster with shape :code:`(height, width, 3)`""",
    mask="""mask: array_like
        An integer label raster aligned with the image, values in
        :code:`{0 background, 1 benign, 2 DCIS, 3 IDC}`""",
    label_map="""label_map: LabelMap
        The per-cell label raster and its physical cell spacing""",
    tissue_mask="""tissue_mask: array_like
        Boolean raster, :code:`True` where a cell contains tissue""",
    components="""components: list[Component]
        Connected components used as seeds, in discovery order""",
    network="""network: Sequential
        A built network graph""",
    window="""window: int
        The edge length of the square sliding window in pixels""",
    stride="""stride: int
        The step between consecutive windows in pixels, default=224""",
    threads="""threads: int
        The number of worker threads, :code:`1` is the deterministic
        sequential mode""",
    seed="""seed: int
        The root seed from which named random streams are derived""",
    rng="""rng: numpy.random.Generator
        The random number generator to draw from""",
    spacing="""spacing: float
        The physical edge length of one cell in micrometers""",
    scores="""scores: array_like
        Per-slide scores for the positive (cancer) class""",
    labels="""labels: array_like
        Integer class labels""",
    cm="""cm: array_like
        A :code:`k x k` confusion matrix, rows are true classes and columns
        are predicted classes""",
)

__all__ = [
    "ContractError",
    "ShapeError",
    "autodoc",
    "env_threads",
    "get_precision",
    "rng",
    "set_precision",
    "setup_logging",
]

LOG_FORMAT = "%(asctime)s %(name)s %(levelname)s: %(message)s"


class ContractError(ValueError):
    """
    Raised when inputs violate a documented data contract, e.g., a window
    larger than the image or a mask with unknown labels.
    """


class ShapeError(ContractError):
    """
    Raised when two arrays have incompatible shapes, the message names both.
    """

    def __init__(self, message, *shapes):
        shapes = ", ".join(str(tuple(shape)) for shape in shapes)
        super().__init__(f"{message}: {shapes}" if shapes else message)


def autodoc(func):
    """
    Simple decorator to mark that a docstring needs formatting
    """
    func.__doc__ = func.__doc__.format(**_docstrings_)
    return func


def set_precision(name):
    """
    Set the floating point precision used to create parameters and cast
    network inputs throughout the package.

    Parameters
    ----------
    name: str
        Either :code:`"float32"` (training) or :code:`"float64"` (gradient
        checks).
    """
    if name not in ("float32", "float64"):
        raise ValueError(f"Unknown precision {name!r}, use float32 or float64")
    from . import nn

    nn.DTYPE = xp.dtype(name)


def get_precision():
    """
    Return the name of the active floating point precision.
    """
    from . import nn

    return nn.DTYPE.name


def rng(seed, name, *keys):
    """
    Derive an independent random generator for a named stream.

    The same :code:`(seed, name, *keys)` always gives the same stream and
    different names never share state, so stages can be re-run
    independently from a single root seed.

    Parameters
    ----------
    seed: int
        The root seed
    name: str
        The stream name, e.g., :code:`"sampling"`, :code:`"init"`,
        :code:`"bootstrap"`
    keys: int
        Optional integer sub-keys, e.g., a slide or tree index

    Returns
    -------
    numpy.random.Generator
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    stream = int.from_bytes(digest[:4], "little")
    sequence = xp.random.SeedSequence([int(seed), stream, *map(int, keys)])
    return xp.random.default_rng(sequence)


def env_threads(default=1):
    """
    Read the worker thread count from :code:`CAS_PIPELINE_THREADS`.
    """
    value = os.environ.get("CAS_PIPELINE_THREADS")
    if value is None:
        return default
    try:
        threads = int(value)
    except ValueError:
        raise ContractError(f"CAS_PIPELINE_THREADS must be an integer, got {value!r}")
    return max(threads, 1)


def setup_logging(verbosity=0):
    """
    Configure the package logger for command line use.

    Library code only ever calls :code:`logging.getLogger(__name__)`, the
    handler is installed here once.

    Parameters
    ----------
    verbosity: int
        :code:`0` for warnings, :code:`1` for info, :code:`2` or more for
        debug output
    """
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG)
    logger = logging.getLogger("casslide")
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(handler)
    logger.setLevel(level)
    return logger
