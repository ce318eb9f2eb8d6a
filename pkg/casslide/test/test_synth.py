import json

import numpy as np
import pytest

from ..constants import BACKGROUND, BENIGN, DCIS, IDC
from ..data import SlideDataset
from ..synth import SynthConfig, assign_splits, generate, generate_slide, value_noise
from ..utils import ContractError, rng


@pytest.fixture
def synth_config():
    return SynthConfig(image_size=256, n_slides_per_class=2, seed=3)


def test_value_noise():
    noise = value_noise((50, 70), 8, rng(0, "test"))
    assert noise.shape == (50, 70)
    assert noise.min() >= 0 and noise.max() <= 1
    assert noise.std() > 0.05


def test_assign_splits():
    names = assign_splits(40, (0.6, 0.15, 0.25), rng(0, "split", 0))
    assert [names.count(split) for split in ("train", "val", "test")] == [24, 6, 10]
    again = assign_splits(40, (0.6, 0.15, 0.25), rng(0, "split", 0))
    assert names == again


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(split_fractions=(0.5, 0.5, 0.5)),
        dict(dcis_fraction=0.6),
        dict(n_slides_per_class=0),
        dict(pixel_spacing_um=0),
    ],
)
def test_invalid_config_raises(kwargs):
    with pytest.raises(ValueError):
        SynthConfig(**kwargs)


def test_slide_too_small_for_invasive_mass():
    with pytest.raises(ContractError):
        SynthConfig(image_size=128)
    assert SynthConfig(image_size=128, pixel_spacing_um=2).image_size == 128


def test_slide_is_deterministic(synth_config):
    image, mask = generate_slide(synth_config, 1, 3)
    again, mask_again = generate_slide(synth_config, 1, 3)
    assert image.shape == (256, 256, 3) and image.dtype == np.uint8
    assert np.array_equal(image, again)
    assert np.array_equal(mask, mask_again)
    other, _ = generate_slide(synth_config, 1, 4)
    assert not np.array_equal(image, other)


def test_benign_slide_has_no_lesions(synth_config):
    _, mask = generate_slide(synth_config, 0, 0)
    assert set(np.unique(mask)) == {BACKGROUND, BENIGN}


def test_dcis_share_meets_target(synth_config):
    _, mask = generate_slide(synth_config, 1, 2)
    share = np.mean(mask[mask != BACKGROUND] == DCIS)
    assert synth_config.dcis_fraction <= share < synth_config.dcis_fraction + 0.03
    assert not np.any(mask == IDC)


def test_invasive_slide(synth_config):
    _, mask = generate_slide(synth_config, 2, 4)
    tissue = mask != BACKGROUND
    assert np.mean(mask[tissue] == IDC) >= synth_config.idc_fraction
    assert np.any(mask == DCIS)
    area_um2 = np.sum(mask == IDC) * synth_config.pixel_spacing_um**2
    assert area_um2 >= synth_config.min_idc_area_um2


def test_lesions_look_darker_than_stroma(synth_config):
    image, mask = generate_slide(synth_config, 2, 4)
    brightness = image.astype(float).mean(axis=-1)
    assert brightness[mask == IDC].mean() < brightness[mask == BENIGN].mean()
    assert brightness[mask == BACKGROUND].mean() > 230


def test_generate_writes_dataset(tmp_path):
    config = SynthConfig(image_size=128, pixel_spacing_um=2, n_slides_per_class=4, seed=1)
    dataset = generate(config, str(tmp_path / "synth"), threads=2)
    assert isinstance(dataset, SlideDataset)
    assert len(dataset.slides) == 12
    assert dataset.pixel_spacing_um == 2
    for label in range(3):
        slides = [slide for slide in dataset.slides if slide.label == label]
        splits = [slide.split for slide in slides]
        assert [splits.count(name) for name in ("train", "val", "test")] == [2, 1, 1]
    slide = dataset.slides[5]
    image, mask = generate_slide(config, slide.label, 5)
    assert np.array_equal(dataset.load_image(slide), image)
    assert np.array_equal(dataset.load_mask(slide), mask)


def test_generate_is_thread_independent(tmp_path):
    config = SynthConfig(image_size=128, pixel_spacing_um=2, n_slides_per_class=2, seed=1)
    indices = list()
    for threads in (1, 3):
        root = tmp_path / f"synth_{threads}"
        generate(config, str(root), threads=threads)
        with open(root / "index.json") as ff:
            indices.append(json.load(ff))
    assert indices[0] == indices[1]
