import numpy as np
import pytest

from ..utils import set_precision
from ..wrn import WrnConfig, build_wrn


@pytest.fixture(params=["float32", "float64"])
def precision(request):
    set_precision(request.param)
    yield request.param
    set_precision("float32")


@pytest.fixture
def float64():
    set_precision("float64")
    yield
    set_precision("float32")


@pytest.fixture(params=[0, 1, 17])
def seed(request):
    return request.param


@pytest.fixture
def tiny_wrn_config():
    return WrnConfig(
        n_blocks_per_group=1,
        width_multiplier=1,
        base_widths=(2, 2, 4),
        initial_width=4,
        patch_size=32,
    )


@pytest.fixture
def tiny_wrn(tiny_wrn_config):
    return build_wrn(tiny_wrn_config, seed=0)


@pytest.fixture
def mean_rgb():
    return np.array([0.8, 0.6, 0.7])


def striped_slide(size=96, lesion=2):
    """
    A saturated tissue block on a white background, the left half benign
    and the right half one lesion label.
    """
    image = np.full((size, size, 3), 250, dtype=np.uint8)
    mask = np.zeros((size, size), dtype=np.uint8)
    image[8:-8, 8:-8] = (200, 90, 160)
    mask[8:-8, 8:-8] = 1
    image[8:-8, size // 2:-8] = (110, 50, 150)
    mask[8:-8, size // 2:-8] = lesion
    return image, mask
