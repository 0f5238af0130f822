import io

import numpy as np
import pytest
from PIL import Image

from apkforge import fusion
from apkforge.errors import ConfigError, EncodeError, InvalidTarget, SizeMismatch
from apkforge.fusion import FuseConfig

import oracles


def test_unit_scale_is_identity():
    img = np.random.default_rng(0).integers(0, 256, (256, 256), dtype=np.uint8)
    assert np.array_equal(fusion.lanczos_resize(img, 256, 256), img)


def test_unit_scale_weights_are_impulses():
    w = fusion.resample_weights(17, 17).toarray()
    assert np.array_equal(w, np.eye(17))


@pytest.mark.parametrize("shape, target", [((7, 13), (256, 256)), ((300, 90), (32, 32)), ((1, 1), (5, 3))])
def test_constant_image_stays_constant(shape, target):
    img = np.full(shape, 173, np.uint8)
    out = fusion.lanczos_resize(img, *target)
    assert out.shape == (target[1], target[0])
    assert (out == 173).all()


def test_weight_rows_sum_to_one():
    for n_in, n_out in ((512, 256), (40, 256), (1000, 7)):
        w = fusion.resample_weights(n_in, n_out)
        assert np.allclose(np.asarray(w.sum(axis=1)).ravel(), 1.0)


def test_halving_ramp_matches_reference():
    ramp = np.tile((np.arange(512) * 255 // 511).astype(np.uint8), (512, 1))
    out = fusion.lanczos_resize(ramp, 256, 256)
    small = ramp[:64, :]   # rows are identical, so a strip suffices for the 2-D reference
    ref = oracles.lanczos_ref(small, 256, 32)
    assert np.abs(out[:32].astype(int) - ref.astype(int)).max() <= 1
    # rows stay equal up to the rounding of exact .5 sums
    assert np.abs(out.astype(int) - out[0].astype(int)).max() <= 1


def test_random_resizes_match_reference():
    rng = np.random.default_rng(4)
    for shape, target in (((20, 30), (11, 9)), ((9, 9), (24, 24)), ((33, 17), (16, 40))):
        img = rng.integers(0, 256, shape, dtype=np.uint8)
        ours = fusion.lanczos_resize(img, *target).astype(int)
        ref = oracles.lanczos_ref(img, *target).astype(int)
        assert np.abs(ours - ref).max() <= 1


def test_invalid_target():
    with pytest.raises(InvalidTarget):
        fusion.lanczos_resize(np.zeros((4, 4), np.uint8), 0, 4)


def test_merge_default_channels():
    one = lambda v: np.full((1, 1), v, np.uint8)
    assert fusion.merge_rgb(one(10), one(20), one(30))[0, 0].tolist() == [10, 20, 30]


def test_merge_mask():
    one = lambda v: np.full((1, 1), v, np.uint8)
    cfg = FuseConfig(channel_mask=frozenset("r"))
    assert fusion.merge_rgb(one(10), one(20), one(30), cfg)[0, 0].tolist() == [10, 0, 0]
    cfg = FuseConfig(channel_mask=fusion.parse_channel_mask("gb"))
    assert fusion.merge_rgb(one(10), one(20), one(30), cfg)[0, 0].tolist() == [0, 20, 30]


def test_merge_zero_planes():
    z = np.zeros((256, 256), np.uint8)
    out = fusion.merge_rgb(z, z, z)
    assert out.shape == (256, 256, 3) and not out.any()


def test_merge_size_mismatch():
    with pytest.raises(SizeMismatch):
        fusion.merge_rgb(np.zeros((4, 4), np.uint8), np.zeros((4, 5), np.uint8), np.zeros((4, 4), np.uint8))


@pytest.mark.parametrize("mask", ["", "x", "rr", "rgba"])
def test_bad_channel_masks(mask):
    with pytest.raises(ConfigError):
        fusion.parse_channel_mask(mask)


def test_png_single_black_pixel():
    data = fusion.encode_png(np.zeros((1, 1, 3), np.uint8))
    im = Image.open(io.BytesIO(data))
    assert im.mode == "RGB" and im.size == (1, 1)
    assert im.getpixel((0, 0)) == (0, 0, 0)


def test_png_roundtrip_rgb_and_gray():
    rng = np.random.default_rng(9)
    rgb = rng.integers(0, 256, (37, 53, 3), dtype=np.uint8)
    assert np.array_equal(np.asarray(Image.open(io.BytesIO(fusion.encode_png(rgb)))), rgb)
    gray = rng.integers(0, 256, (5, 300), dtype=np.uint8)
    im = Image.open(io.BytesIO(fusion.encode_png(gray)))
    assert im.mode == "L" and np.array_equal(np.asarray(im), gray)


def test_png_is_deterministic():
    img = np.random.default_rng(1).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    assert fusion.encode_png(img) == fusion.encode_png(img.copy())


def test_png_rejects_bad_input():
    with pytest.raises(EncodeError):
        fusion.encode_png(np.zeros((2, 2), np.float32))
    with pytest.raises(EncodeError):
        fusion.encode_png(np.zeros((2, 2, 4), np.uint8))
