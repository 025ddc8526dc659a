import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mitoforge.augment import (
    AugmentConfig,
    BlackBorderConfig,
    BlurConfig,
    CoarseDropoutConfig,
    affine_warp,
    adjust_color,
    apply_black_border,
    black_border,
    blur_disk,
    build_pipeline,
    coarse_dropout,
    d4_compose,
    d4_transform,
    disk_kernel,
    fill_boxes,
    jpeg_compress,
    normalize_imagenet,
    psnr,
    random_affine,
    resize_bilinear,
)
from mitoforge.data import render_crop
from mitoforge.errors import ConfigError, ContractError
from mitoforge.rng import rng_stream
from mitoforge.stain import StainProfilePool, fit_profile
from oracles import beer_lambert_image, random_stain_matrix


def noise_image(seed, size=32):
    return rng_stream(seed, "aug-img").integers(0, 256, size=(size, size, 3), dtype=np.uint8)


def tissue_image(seed=0):
    return render_crop(int(seed % 2), 0, rng_stream(seed, "aug-tissue"))


# -- D4 --------------------------------------------------------------------------------------------------
def test_d4_identity_and_hand_example():
    img = np.array([[1, 2], [3, 4]])[..., None]
    np.testing.assert_array_equal(d4_transform(img, 0), img)
    np.testing.assert_array_equal(d4_transform(img, 1)[..., 0], [[3, 1], [4, 2]])


def test_d4_quarter_turn_order_four():
    img = noise_image(0, 5)
    out = img
    for _ in range(4):
        out = d4_transform(out, 1)
    np.testing.assert_array_equal(out, img)


def test_d4_index_map():
    img = noise_image(1, 6)
    n = img.shape[0]
    out = d4_transform(img, 1)
    for i in range(n):
        for j in range(n):
            np.testing.assert_array_equal(out[i, j], img[n - 1 - j, i])


def test_d4_group_table_closed_with_inverses():
    img = noise_image(2, 5)
    views = [d4_transform(img, e) for e in range(8)]
    assert len({v.tobytes() for v in views}) == 8
    for a in range(8):
        for b in range(8):
            c = d4_compose(a, b)
            np.testing.assert_array_equal(d4_transform(d4_transform(img, b), a), views[c])
        assert any(d4_compose(a, b) == 0 for b in range(8))


def test_d4_rejects_non_square():
    with pytest.raises(ContractError):
        d4_transform(np.zeros((2, 3, 3), np.uint8), 1)


# -- affine ----------------------------------------------------------------------------------------------
def test_affine_zero_magnitude_identity():
    cfg = AugmentConfig().affine
    cfg.rotation = (0.0, 0.0)
    cfg.scale = (1.0, 1.0)
    cfg.translate = 0.0
    cfg.shear = (0.0, 0.0)
    img = noise_image(3)
    np.testing.assert_array_equal(random_affine(img, rng_stream(0, "a"), cfg), img)


def test_affine_quarter_turn_matches_d4():
    img = noise_image(4)
    diff = affine_warp(img, angle=90.0).astype(int) - d4_transform(img, 1).astype(int)
    assert np.abs(diff).max() <= 1


def test_affine_fills_black_and_keeps_shape():
    img = np.full((32, 32, 3), 200, np.uint8)
    out = affine_warp(img, translate=(10.0, 0.0))
    assert out.shape == img.shape
    assert (out[:, :9] == 0).all() and (out[:, 11:] == 200).all()


# -- photometric -----------------------------------------------------------------------------------------
def test_color_identity_and_clamp():
    img = noise_image(5)
    np.testing.assert_array_equal(adjust_color(img), img)
    assert adjust_color(np.full((1, 1, 3), 128, np.uint8), brightness=2.0)[0, 0, 0] == 255


def test_saturation_zero_gives_luma():
    img = noise_image(6)
    out = adjust_color(img, saturation=0.0)
    luma = np.floor(img.astype(float) @ np.array([0.299, 0.587, 0.114]) + 0.5)
    for c in range(3):
        np.testing.assert_array_equal(out[..., c], luma)


def test_blur_radius_zero_and_constant():
    img = noise_image(7)
    np.testing.assert_array_equal(blur_disk(img, 0), img)
    const = np.full((16, 16, 3), 77, np.uint8)
    np.testing.assert_array_equal(blur_disk(const, 3), const)


@pytest.mark.parametrize("radius", [1, 2, 3])
def test_blur_impulse_support_is_disk(radius):
    img = np.zeros((15, 15, 3), np.uint8)
    img[7, 7] = 255
    out = blur_disk(img, radius)[..., 0]
    yy, xx = np.mgrid[-7:8, -7:8]
    inside = yy**2 + xx**2 <= radius**2
    assert (out[~inside] == 0).all()
    assert (out[inside] > 0).all()
    assert abs(disk_kernel(radius).sum() - 1.0) < 1e-12


def test_jpeg_quality_100_psnr_and_monotone():
    img = tissue_image(0)
    assert psnr(jpeg_compress(img, 100), img) >= 40.0
    assert psnr(jpeg_compress(img, 10), img) < psnr(jpeg_compress(img, 90), img)
    assert jpeg_compress(noise_image(8, 30), 50).shape == (30, 30, 3)


def test_jpeg_quality_100_near_idempotent():
    once = jpeg_compress(tissue_image(1), 100)
    assert psnr(jpeg_compress(once, 100), once) >= 45.0


# -- occlusion -------------------------------------------------------------------------------------------
def test_dropout_none_is_identity():
    img = noise_image(9)
    np.testing.assert_array_equal(fill_boxes(img, []), img)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_dropout_fills_only_boxes(seed):
    img = np.full((64, 64, 3), 9, np.uint8)
    out = coarse_dropout(img, rng_stream(seed, "drop"), CoarseDropoutConfig())
    zeros = (out == 0).all(axis=2)
    assert ((out == 0) | (out == 9)).all()
    assert zeros.sum() <= 2 * 32 * 32


def test_border_examples():
    img = noise_image(10, 40) | 1
    out = apply_black_border(img, left=5)
    assert (out[:, :5] == 0).all()
    np.testing.assert_array_equal(out[:, 5:], img[:, 5:])
    np.testing.assert_array_equal(apply_black_border(img), img)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_border_interior_unchanged(seed):
    img = noise_image(seed % 50, 64) | 1
    out = black_border(img, rng_stream(seed, "border"), BlackBorderConfig())
    np.testing.assert_array_equal(out[24:40, 24:40], img[24:40, 24:40])
    assert out.shape == img.shape


# -- resize / normalize ----------------------------------------------------------------------------------
def test_resize_examples():
    row = np.array([[[0] * 3, [255] * 3]], np.uint8)
    np.testing.assert_array_equal(resize_bilinear(row, 4, 1)[0, :, 0], [0, 85, 170, 255])
    const = np.full((5, 7, 3), 42, np.uint8)
    assert (resize_bilinear(const, 13, 3) == 42).all()
    assert resize_bilinear(noise_image(0, 64), 128, 128).shape == (128, 128, 3)
    with pytest.raises(ContractError):
        resize_bilinear(row, 0, 1)


def test_normalize_examples():
    red = np.zeros((1, 1, 3), np.uint8)
    red[..., 0] = 124
    assert abs(normalize_imagenet(red)[0, 0, 0] - 0.0064) < 1e-3
    white = normalize_imagenet(np.full((2, 3, 3), 255, np.uint8))
    assert white.shape == (3, 2, 3)
    np.testing.assert_allclose(white[:, 0, 0], [2.2489, 2.4286, 2.6400], atol=1e-3)


# -- pipeline --------------------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def pool():
    rng = rng_stream(0, "pool")
    img, _ = beer_lambert_image(random_stain_matrix(rng), rng)
    return StainProfilePool({"a": [fit_profile(img, domain="a")]})


def test_disabled_pipeline_is_normalization(pool):
    img = tissue_image(2)
    pipe = build_pipeline(AugmentConfig.disabled(), pool, 0)
    np.testing.assert_array_equal(pipe(img, 3, 1), normalize_imagenet(img))


def test_pipeline_deterministic(pool):
    img = tissue_image(3)
    a = build_pipeline(AugmentConfig(), pool, 7)
    b = build_pipeline(AugmentConfig(), pool, 7)
    for idx in range(10):
        assert a(img, idx, 2).tobytes() == b(img, idx, 2).tobytes()


def test_pipeline_epochs_draw_differently():
    pipe = build_pipeline(AugmentConfig(), None, 0)
    img = noise_image(4, 16)
    collisions = sum(pipe.augment(img, i, 0)[1] == pipe.augment(img, i, 1)[1] for i in range(1000))
    # both draws empty (every gate closed) has probability 2^-14 per pair
    assert collisions <= 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pipeline_preserves_shape_and_range(seed):
    img = tissue_image(seed % 7)
    out, _ = build_pipeline(AugmentConfig(), None, seed).augment(img, seed, 0)
    assert out.shape == img.shape and out.dtype == np.uint8


def test_config_errors_listed_together():
    cfg = AugmentConfig()
    cfg.jpeg.p = 1.5
    cfg.coarse_dropout.max_boxes = 3
    cfg.blur.radius = (3, 1)
    with pytest.raises(ConfigError) as info:
        cfg.validate()
    msg = str(info.value)
    assert "jpeg.p" in msg and "max_boxes" in msg and "blur.radius" in msg


def test_config_round_trip():
    cfg = AugmentConfig()
    cfg.blur = BlurConfig(p=0.2, radius=(1, 2))
    assert AugmentConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        AugmentConfig.from_dict({"mixup": {}})
