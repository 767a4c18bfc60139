import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from irissr.image import (CoverageGapError, DEGRADE_FACTORS, as_image, assemble_patches, degrade,
                          downscale, extract_patches, load_image, resize, save_image, to_gray)

unit = st.floats(0, 1, allow_nan=False, width=64)


def images(min_side=1, max_side=24):
    return hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=min_side, max_side=max_side),
                      elements=unit)


def naive_resize(img, out_w, out_h, a=-0.5):
    """Per-pixel Catmull-Rom with edge clamping, written independently of the library."""

    def k(x):
        x = abs(x)
        if x <= 1:
            return (a + 2) * x**3 - (a + 3) * x**2 + 1
        if x < 2:
            return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
        return 0.0

    h, w = img.shape

    def axis(n_in, n_out):
        m = np.zeros((n_out, n_in))
        for o in range(n_out):
            src = (o + 0.5) * n_in / n_out - 0.5
            for t in range(int(np.floor(src)) - 1, int(np.floor(src)) + 3):
                m[o, min(max(t, 0), n_in - 1)] += k(src - t)
        return m

    out = img
    if out_h != h:
        out = axis(h, out_h) @ out
    if out_w != w:
        out = out @ axis(w, out_w).T
    return np.clip(out, 0, 1)


@given(images())
def test_resize_same_size_is_bitwise_identity(img):
    h, w = img.shape
    assert np.array_equal(resize(img, w, h), img)
    assert np.array_equal(resize(img, w, h, "bilinear"), img)


@given(images(), st.integers(1, 30), st.integers(1, 30))
def test_bicubic_matches_per_pixel_reference(img, out_w, out_h):
    np.testing.assert_allclose(resize(img, out_w, out_h), naive_resize(img, out_w, out_h), atol=1e-12)


@pytest.mark.parametrize("kernel,pil", [("bicubic", Image.BICUBIC), ("bilinear", Image.BILINEAR)])
def test_upscale_interior_matches_pillow(rng, kernel, pil):
    a = rng.random((20, 30)).astype(np.float32)
    ours = resize(a, 60, 40, kernel)
    theirs = np.clip(np.asarray(Image.fromarray(a, mode="F").resize((60, 40), pil)), 0, 1)
    np.testing.assert_allclose(ours[4:-4, 4:-4], theirs[4:-4, 4:-4], atol=1e-6)


@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 40), st.integers(1, 40), unit)
def test_constant_images_survive_resampling(h, w, out_h, out_w, value):
    img = np.full((h, w), value)
    for kernel in ("bicubic", "bilinear"):
        np.testing.assert_allclose(resize(img, out_w, out_h, kernel), value, atol=1e-12)


@given(images())
def test_resize_output_in_unit_range(img):
    out = resize(img, 2 * img.shape[1] + 1, 2 * img.shape[0] + 1)
    assert out.min() >= 0 and out.max() <= 1


def test_resize_rejects_bad_sizes():
    with pytest.raises(ValueError):
        resize(np.zeros((4, 4)), 0, 4)
    with pytest.raises(ValueError):
        resize(np.zeros((4, 4)), 4, 4, "lanczos")


@given(st.integers(1, 70), st.integers(1, 70), st.sampled_from(DEGRADE_FACTORS))
def test_downscale_floors_each_dimension(h, w, factor):
    small = downscale(np.zeros((h, w)), factor)
    assert small.shape == (max(h // factor, 1), max(w // factor, 1))
    assert degrade(np.zeros((h, w)), factor).shape == (h, w)


def test_downscale_231_by_8_is_28():
    assert downscale(np.zeros((231, 231)), 8).shape == (28, 28)


@pytest.mark.parametrize("factor", [0, 1, 3, 32, 2.5])
def test_unsupported_factor_rejected(factor):
    with pytest.raises(ValueError):
        degrade(np.zeros((32, 32)), factor)


def test_degradation_loses_more_at_larger_factors(rng):
    img = np.clip(rng.random((64, 64)) * 0.5 + 0.25, 0, 1)
    errs = [np.mean((degrade(img, f) - img) ** 2) for f in DEGRADE_FACTORS]
    assert errs == sorted(errs)


def test_extract_patches_layout():
    img = np.arange(10 * 12, dtype=float).reshape(10, 12)
    ps = extract_patches(img, 4, 3)
    assert ps.origins == [(r, c) for r in (0, 3, 6) for c in (0, 3, 6)]
    for patch, (r, c) in zip(ps.patches, ps.origins):
        assert np.array_equal(patch, img[r : r + 4, c : c + 4])
    assert len(ps) == 9


def test_extract_patches_validation():
    with pytest.raises(ValueError):
        extract_patches(np.zeros((5, 5)), 6, 1)
    with pytest.raises(ValueError):
        extract_patches(np.zeros((5, 5)), 3, 0)


@given(images(min_side=6), st.integers(1, 6), st.data())
def test_extract_then_assemble_roundtrip(img, size, data):
    size = min(size, *img.shape)
    stride = data.draw(st.integers(1, size))
    h, w = img.shape
    ps = extract_patches(img, size, stride)
    origins = list(ps.origins)
    blocks = list(ps.patches)
    # close the right/bottom edges the regular grid may miss
    for r in sorted({o[0] for o in origins} | {h - size}):
        for c in sorted({o[1] for o in origins} | {w - size}):
            if (r, c) not in ps.origins:
                origins.append((r, c))
                blocks.append(img[r : r + size, c : c + size])
    np.testing.assert_allclose(assemble_patches(blocks, origins, w, h), img, atol=1e-12)


def test_assemble_averages_overlaps():
    out = assemble_patches([np.zeros((2, 2)), np.ones((2, 2))], [(0, 0), (0, 1)], 3, 2)
    np.testing.assert_allclose(out, [[0, 0.5, 1], [0, 0.5, 1]])


def test_assemble_gap_and_overflow():
    with pytest.raises(CoverageGapError):
        assemble_patches([np.zeros((2, 2))], [(0, 0)], 3, 2)
    with pytest.raises(ValueError):
        assemble_patches([np.zeros((2, 2))], [(1, 2)], 3, 2)


@pytest.mark.parametrize("suffix", [".png", ".pgm"])
def test_image_roundtrip(tmp_path, rng, suffix):
    img = rng.random((17, 23))
    path = tmp_path / f"x{suffix}"
    save_image(img, path)
    back = load_image(path)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    if suffix == ".pgm":
        assert path.read_bytes()[:2] == b"P5"


def test_color_images_become_luma(tmp_path):
    rgb = np.zeros((4, 4, 3), dtype=np.uint8)
    rgb[..., 1] = 255
    Image.fromarray(rgb).save(tmp_path / "g.png")
    np.testing.assert_allclose(load_image(tmp_path / "g.png"), 0.587, atol=1e-12)
    np.testing.assert_allclose(to_gray(np.ones((2, 2, 3))), 1.0)


def test_as_image_validates_and_clips():
    with pytest.raises(ValueError):
        as_image(np.zeros((2, 2, 2)))
    assert as_image([[2.0, -1.0]]).tolist() == [[1.0, 0.0]]
