from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from depthcomp.errors import ImageIOError, ShapeError, UnsupportedBitDepthError
from depthcomp.imaging import (
    AffineParams,
    BinaryMask,
    DepthMap,
    ImageRgba,
    affine_place,
    alpha_over,
    array_to_images,
    chroma_key_mask,
    classical_composite,
    images_to_array,
    load_depth,
    load_image,
    quantize,
    save_depth,
    save_image,
    threshold_depth,
    to_codes,
)


def random_image(rng, h=8, w=8, quantized=True):
    px = rng.uniform(size=(h, w, 4))
    img = ImageRgba(px)
    return quantize(img) if quantized else img


def composite_oracle(fg, fg_depth, bg, depth):
    """Per-pixel loop over the depth test and the over operator, in float32 like the library."""
    h, w = depth.shape
    out = np.zeros((h, w, 4), dtype=np.float32)
    for i in range(h):
        for j in range(w):
            if depth[i, j] >= np.float32(fg_depth):
                out[i, j] = bg[i, j]
                continue
            a = fg[i, j, 3:4]
            rgb = a * fg[i, j, :3] + (np.float32(1) - a) * bg[i, j, :3]
            alpha = a + (np.float32(1) - a) * bg[i, j, 3:4]
            out[i, j] = np.clip(np.concatenate([rgb, alpha]), 0, 1)
    return out


class TestDataModel:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ImageRgba(np.full((2, 2, 4), 1.5))

    def test_rejects_bad_shape(self):
        with pytest.raises(ShapeError):
            ImageRgba(np.zeros((2, 2, 3)))

    def test_mask_binary(self):
        with pytest.raises(ValueError):
            BinaryMask(np.array([[0, 2]]))

    def test_affine_positive_scale(self):
        with pytest.raises(ValueError):
            AffineParams(sx=0.0)


class TestThreshold:
    def test_inclusive_boundary(self):
        depth = DepthMap(np.array([[0.49, 0.5, 0.51]]))
        assert threshold_depth(depth, 0.5).values.tolist() == [[0, 1, 1]]

    def test_extremes(self, rng):
        depth = DepthMap(rng.uniform(size=(4, 4)))
        assert threshold_depth(depth, 0.0).count() == 16
        assert threshold_depth(DepthMap(np.full((2, 2), 0.99)), 1.0).count() == 0


class TestOver:
    def test_opaque_foreground_wins(self, rng):
        fg = ImageRgba(np.concatenate([rng.uniform(size=(3, 3, 3)), np.ones((3, 3, 1))], axis=-1))
        bg = random_image(rng, 3, 3)
        assert alpha_over(fg, bg) == fg

    def test_transparent_foreground_is_noop(self, rng):
        fg = ImageRgba(np.zeros((3, 3, 4)))
        bg = random_image(rng, 3, 3)
        assert alpha_over(fg, bg) == bg

    def test_half_alpha_value(self):
        fg = ImageRgba.filled(1, 1, [1.0, 0.0, 0.0, 0.5])
        bg = ImageRgba.filled(1, 1, [0.0, 0.0, 1.0, 1.0])
        np.testing.assert_allclose(alpha_over(fg, bg).pixels[0, 0], [0.5, 0.0, 0.5, 1.0])

    def test_size_mismatch(self, rng):
        with pytest.raises(ShapeError):
            alpha_over(random_image(rng, 2, 2), random_image(rng, 3, 3))


class TestClassicalComposite:
    def test_matches_oracle_on_random_scenes(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            fg, bg = random_image(rng, 6, 7), random_image(rng, 6, 7)
            depth = DepthMap(rng.uniform(size=(6, 7)))
            fg_depth = float(rng.uniform(0.2, 0.8))
            got = classical_composite(fg, fg_depth, bg, depth).pixels
            assert np.array_equal(got, composite_oracle(fg.pixels, fg_depth, bg.pixels, depth.values))

    def test_far_background_reduces_to_over(self, rng):
        fg, bg = random_image(rng), random_image(rng)
        depth = DepthMap(np.zeros((8, 8)))
        assert classical_composite(fg, 0.5, bg, depth) == alpha_over(fg, bg)


class TestAffinePlace:
    def test_identity(self, rng):
        img = random_image(rng)
        assert affine_place(img, AffineParams.identity()) == img

    def test_far_shift_empties(self, rng):
        out = affine_place(random_image(rng), AffineParams(tx=5.0))
        assert out.alpha.max() == 0.0


class TestChromaKey:
    def test_key_pixels_masked(self):
        px = np.zeros((1, 3, 4))
        px[0, 0, :3] = [0, 1, 0]
        px[0, 1, :3] = [0, 1 - 1 / 255, 0]
        px[0, 2, :3] = [0.5, 0.5, 0.5]
        mask = chroma_key_mask(ImageRgba(px), [0, 1, 0])
        assert mask.values.tolist() == [[0, 0, 1]]

    def test_bad_key(self, rng):
        with pytest.raises(ValueError):
            chroma_key_mask(random_image(rng), [0, 2, 0])


class TestIO:
    def test_png_round_trip_lossless(self, tmp_path, rng):
        img = random_image(rng, 9, 5)
        save_image(img, tmp_path / "a.png")
        assert load_image(tmp_path / "a.png") == img

    def test_rgb_gains_opaque_alpha(self, tmp_path):
        Image.fromarray(np.full((2, 2, 3), 7, dtype=np.uint8)).save(tmp_path / "rgb.png")
        img = load_image(tmp_path / "rgb.png")
        assert np.all(img.alpha == 1.0)

    def test_16bit_image_rejected(self, tmp_path):
        Image.fromarray(np.zeros((2, 2), dtype="<u2")).save(tmp_path / "d.png")
        with pytest.raises(UnsupportedBitDepthError):
            load_image(tmp_path / "d.png")

    def test_not_a_png(self, tmp_path):
        (tmp_path / "x.png").write_bytes(b"hello")
        with pytest.raises(ImageIOError, match="x.png"):
            load_image(tmp_path / "x.png")

    @pytest.mark.parametrize("bits", [8, 16])
    def test_depth_round_trip(self, tmp_path, rng, bits):
        codes = rng.integers(0, 2 ** bits, size=(4, 6))
        depth = DepthMap(codes / (2 ** bits - 1))
        save_depth(depth, tmp_path / "d.png", bits=bits)
        assert np.array_equal(to_codes(load_depth(tmp_path / "d.png").values, 2 ** bits - 1), codes)

    def test_depth_must_be_gray(self, tmp_path, rng):
        save_image(random_image(rng), tmp_path / "c.png")
        with pytest.raises(ImageIOError):
            load_depth(tmp_path / "c.png")


class TestTensorConversion:
    def test_round_trip(self, rng):
        imgs = [random_image(rng) for _ in range(3)]
        arr = images_to_array(imgs)
        assert arr.shape == (3, 4, 8, 8) and arr.min() >= -1 and arr.max() <= 1
        back = array_to_images(arr)
        for a, b in zip(imgs, back):
            np.testing.assert_allclose(a.pixels, b.pixels, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2 ** 32 - 1))
def test_over_stays_in_range(h, w, seed):
    r = np.random.default_rng(seed)
    out = alpha_over(ImageRgba(r.uniform(size=(h, w, 4))), ImageRgba(r.uniform(size=(h, w, 4))))
    assert out.pixels.min() >= 0 and out.pixels.max() <= 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_quantize_idempotent(seed):
    img = quantize(ImageRgba(np.random.default_rng(seed).uniform(size=(3, 4, 4))))
    assert quantize(img) == img
