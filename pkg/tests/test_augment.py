import numpy as np
import pytest

from maect.augment import augment, augment_batch, hflip, resize_bilinear, sample_crop_box


def test_none_mode_is_identity():
    img = np.random.default_rng(0).random((8, 8, 3))
    out = augment(img, np.random.default_rng(1), mode="none")
    assert out.tobytes() == img.tobytes()
    assert augment_batch(img[None], np.random.default_rng(1), mode="none").tobytes() == img.tobytes()


def test_flip_is_an_involution():
    img = np.random.default_rng(0).random((5, 7, 3))
    assert hflip(hflip(img)).tobytes() == img.tobytes()
    assert np.array_equal(hflip(img)[:, 0], img[:, -1])


def test_flip_frequency():
    # full-size crop, so each output is either the image or its mirror
    img = np.random.default_rng(0).random((6, 6, 3))
    rng = np.random.default_rng(1)
    flips = sum(np.allclose(augment(img, rng, scale=(1.0, 1.0)), hflip(img)) for _ in range(5000))
    assert abs(flips / 5000 - 0.5) < 0.02


def test_crop_boxes_stay_inside_and_respect_scale():
    rng = np.random.default_rng(0)
    for _ in range(500):
        top, left, h, w = sample_crop_box(32, 32, rng)
        assert 0 <= top and top + h <= 32 and 0 <= left and left + w <= 32
        assert 0.15 * 1024 <= h * w <= 1024


def test_resize_identity_and_constant():
    img = np.random.default_rng(0).random((6, 6, 3))
    np.testing.assert_allclose(resize_bilinear(img, 6, 6), img, atol=1e-15)
    np.testing.assert_allclose(resize_bilinear(np.full((3, 3, 3), 0.25), 8, 8), 0.25, atol=1e-15)


def test_augment_keeps_shape_and_range():
    img = np.random.default_rng(0).random((8, 8, 3))
    out = augment_batch(np.stack([img] * 4), np.random.default_rng(2))
    assert out.shape == (4, 8, 8, 3) and out.min() >= 0 and out.max() <= 1


def test_unknown_mode():
    with pytest.raises(ValueError):
        augment(np.zeros((4, 4, 3)), np.random.default_rng(0), mode="jitter")
