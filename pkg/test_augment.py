"""
Tests for the pretext corruptions
"""

import numpy as np
import pytest

from organoid_augment import (
    AugmentationSpec,
    derive_seed,
    drop_count,
    gaussian_blur_halfres,
    pixel_drop,
    sobel_filter,
)
from organoid_errors import FractionOutOfRange, ImageTooSmall, OddDimensions, OrganoidValidationError


@pytest.fixture
def image():
    return np.random.default_rng(0).uniform(0.1, 1.0, size=(32, 32)).astype(np.float32)


@pytest.mark.parametrize("fraction", [0.25, 0.5, 0.75])
def test_pixel_drop_zeroes_exact_count(image, fraction):
    dropped = pixel_drop(image, fraction, seed=5)
    assert int((dropped == 0).sum()) == drop_count(fraction, image.size)
    kept = dropped != 0
    assert np.array_equal(dropped[kept], image[kept])


def test_pixel_drop_rounds_halves_up():
    assert drop_count(0.25, 10) == 3
    assert drop_count(0.5, 9) == 5


def test_pixel_drop_is_seeded(image):
    assert np.array_equal(pixel_drop(image, 0.5, 11), pixel_drop(image, 0.5, 11))
    assert not np.array_equal(pixel_drop(image, 0.5, 11), pixel_drop(image, 0.5, 12))


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1])
def test_pixel_drop_fraction_bounds(image, fraction):
    with pytest.raises(FractionOutOfRange):
        pixel_drop(image, fraction, 0)


def test_blur_keeps_shape_and_range(image):
    blurred = gaussian_blur_halfres(image)
    assert blurred.shape == image.shape
    assert blurred.min() >= 0.0 and blurred.max() <= 1.0
    # smoothing lowers the variance of noise
    assert blurred.var() < image.var()


def test_blur_of_constant_is_constant():
    flat = np.full((16, 16), 0.4, dtype=np.float32)
    assert np.allclose(gaussian_blur_halfres(flat), 0.4, atol=1e-6)


def test_blur_needs_even_dimensions():
    with pytest.raises(OddDimensions):
        gaussian_blur_halfres(np.zeros((15, 16), dtype=np.float32))


def test_sobel_range_and_flat_response():
    assert np.allclose(sobel_filter(np.full((8, 8), 0.7, dtype=np.float32)), 0.0)
    step = np.zeros((8, 8), dtype=np.float32)
    step[:, 4:] = 1.0
    edges = sobel_filter(step)
    assert edges.max() <= 1.0
    assert edges[:, 3:5].min() > 0.0
    assert np.allclose(edges[:, :2], 0.0)


def test_blur_spreads_a_single_bright_pixel():
    spike = np.zeros((32, 32), dtype=np.float32)
    spike[16, 16] = 1.0
    blurred = gaussian_blur_halfres(spike)
    assert blurred.max() < 1.0
    assert blurred.sum() > 0.0


def test_sobel_stays_in_unit_range_on_noise():
    rng = np.random.default_rng(10)
    for _ in range(20):
        edges = sobel_filter(rng.uniform(size=(32, 32)).astype(np.float32))
        assert edges.min() >= 0.0 and edges.max() <= 1.0


def test_sobel_needs_three_pixels():
    with pytest.raises(ImageTooSmall):
        sobel_filter(np.zeros((2, 8), dtype=np.float32))


def test_spec_parsing():
    spec = AugmentationSpec.parse("pixel-drop:0.25", seed=4)
    assert spec.kind == "pixel_drop" and spec.drop_fraction == 0.25 and spec.seed == 4
    assert spec.label == "pixel-drop:0.25"
    assert AugmentationSpec.parse("blur").kind == "gaussian_blur"
    assert AugmentationSpec.parse("SOBEL").label == "sobel"
    assert not AugmentationSpec.parse("pixel-drop:0.3").is_standard_setting
    with pytest.raises(OrganoidValidationError):
        AugmentationSpec.parse("jpeg")


def test_spec_validation():
    with pytest.raises(FractionOutOfRange):
        AugmentationSpec(kind="pixel_drop", drop_fraction=1.5)
    with pytest.raises(OrganoidValidationError):
        AugmentationSpec(kind="sobel", drop_fraction=0.5)


def test_derived_seeds():
    assert derive_seed(26, 3, "a") == derive_seed(26, 3, "a")
    assert derive_seed(26, 3, "a") != derive_seed(26, 4, "a")
    assert derive_seed(26, None, "a") != derive_seed(26, 0, "a")
    assert 0 <= derive_seed(26, 1, "b") < 2 ** 63
