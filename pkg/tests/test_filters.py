"""Filter primitives against directly computed oracles."""

import math
from collections import Counter

import numpy as np
import pytest

from tomoseg.core import LabelVolume
from tomoseg.errors import ConfigError, ShapeError
from tomoseg.filters import (
    FilterConfig,
    fill_holes_3d,
    gaussian_kernel_1d,
    hist_equalize,
    median_filter,
    mode_fuse,
    unsharp_mask,
)


def reference_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Direct 2D convolution with the truncated Gaussian, symmetric padding."""
    radius = int(math.floor(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k1 = np.exp(-0.5 * (x / sigma) ** 2)
    k1 /= k1.sum()
    k2 = np.outer(k1, k1)
    padded = np.pad(img.astype(np.float64), radius, mode="symmetric")
    out = np.empty(img.shape, dtype=np.float64)
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            out[i, j] = (padded[i:i + 2 * radius + 1, j:j + 2 * radius + 1] * k2).sum()
    return out


def test_unsharp_constant_unchanged():
    img = np.full((9, 7), 4321, dtype=np.uint16)
    assert np.array_equal(unsharp_mask(img, 2.0, 1.0), img)


def test_unsharp_amount_zero_is_identity():
    rng = np.random.Generator(np.random.Philox(1))
    img = rng.integers(0, 65536, (11, 13), dtype=np.uint16)
    assert np.array_equal(unsharp_mask(img, 1.5, 0.0), img)


def test_unsharp_matches_direct_kernel_evaluation():
    rng = np.random.Generator(np.random.Philox(2))
    img = rng.integers(0, 65536, (12, 10), dtype=np.uint16)
    for sigma, amount in ((1.0, 1.0), (2.0, 0.5), (1.5, 2.0)):
        expected = img + amount * (img - reference_blur(img, sigma))
        expected = np.rint(np.clip(expected, 0, 65535)).astype(np.uint16)
        assert np.array_equal(unsharp_mask(img, sigma, amount), expected)


def test_unsharp_spike_response():
    img = np.full((9, 9), 1000, dtype=np.uint16)
    img[4, 4] = 11000
    out = unsharp_mask(img, 1.0, 1.0)
    assert out[4, 4] > img[4, 4]
    for di, dj in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        assert out[4 + di, 4 + dj] < img[4 + di, 4 + dj]


def test_unsharp_kernel_truncation():
    # radius floor(3*sigma): sigma=1.5 keeps 9 taps
    assert gaussian_kernel_1d(1.0).size == 7
    assert gaussian_kernel_1d(1.5).size == 9
    assert gaussian_kernel_1d(2.0).size == 13
    assert gaussian_kernel_1d(1.0).sum() == pytest.approx(1.0)


def test_median_constant_unchanged():
    img = np.full((8, 8), 77, dtype=np.uint16)
    assert np.array_equal(median_filter(img, 1), img)


def test_median_removes_salt_pixel():
    img = np.full((7, 7), 100, dtype=np.uint16)
    img[3, 3] = 65535
    out = median_filter(img, 1)
    assert out[3, 3] == 100
    assert (out == 100).all()


def test_median_idempotent_on_cleaned_sparse_noise():
    rng = np.random.Generator(np.random.Philox(3))
    img = np.zeros((32, 32), dtype=np.uint16)
    # isolated salt, pairwise far apart, dies in one pass
    for _ in range(10):
        i, j = rng.integers(2, 30, size=2)
        img[i, j] = 65535
    once = median_filter(img, 1)
    twice = median_filter(once, 1)
    assert np.array_equal(once, twice)


def test_histeq_constant_unchanged():
    img = np.full((6, 6), 12345, dtype=np.uint16)
    assert np.array_equal(hist_equalize(img, 256), img)


def test_histeq_two_level_example():
    img = np.zeros((4, 4), dtype=np.uint16)
    img[:2] = 0
    img[2:] = 65535
    out = hist_equalize(img, 256)
    lo, hi = np.unique(out)
    assert abs(int(lo) - 32767) <= 1
    assert hi == 65535


def test_histeq_entropy_does_not_decrease():
    def entropy(img):
        h = np.bincount(((img.astype(np.int64) * 64) >> 16).ravel(), minlength=64)
        p = h[h > 0] / img.size
        return float(-(p * np.log(p)).sum())

    for seed in range(3):
        r = np.random.Generator(np.random.Philox(seed))
        skewed = ((r.random((48, 48)) ** 3) * 65535).astype(np.uint16)
        assert entropy(hist_equalize(skewed, 256)) >= entropy(skewed) - 1e-9


def test_histeq_rejects_bad_bins():
    with pytest.raises(ConfigError):
        hist_equalize(np.zeros((4, 4), dtype=np.uint16), 1)


def test_filters_preserve_shape_and_reject_3d():
    rng = np.random.Generator(np.random.Philox(5))
    img = rng.integers(0, 65536, (9, 14), dtype=np.uint16)
    for fn in (lambda i: unsharp_mask(i, 1.0, 1.0),
               lambda i: median_filter(i, 1),
               lambda i: hist_equalize(i, 64)):
        out = fn(img)
        assert out.shape == img.shape
        assert out.dtype == np.uint16
        with pytest.raises(ShapeError):
            fn(np.zeros((2, 3, 4), dtype=np.uint16))


def test_filter_config_validation():
    FilterConfig()
    with pytest.raises(ConfigError):
        FilterConfig(unsharp_sigma=0.0)
    with pytest.raises(ConfigError):
        FilterConfig(unsharp_amount=-1.0)
    with pytest.raises(ConfigError):
        FilterConfig(median_radius=0)
    with pytest.raises(ConfigError):
        FilterConfig(histeq_bins=1)


def _vol(arr):
    return LabelVolume(np.asarray(arr, dtype=np.uint8))


def test_mode_fuse_exhaustive_triples():
    ids = np.arange(6, dtype=np.uint8)
    a = np.broadcast_to(ids[:, None, None], (6, 6, 6))
    b = np.broadcast_to(ids[None, :, None], (6, 6, 6))
    c = np.broadcast_to(ids[None, None, :], (6, 6, 6))
    fused = mode_fuse(_vol(a), _vol(b), _vol(c), tiebreak="a")
    for i in range(6):
        for j in range(6):
            for k in range(6):
                counts = Counter((i, j, k)).most_common()
                expected = counts[0][0] if counts[0][1] >= 2 else i
                assert fused.data[i, j, k] == expected, (i, j, k)


def test_mode_fuse_tiebreak_selects_source():
    a, b, c = _vol([[[1]]]), _vol([[[2]]]), _vol([[[3]]])
    assert mode_fuse(a, b, c, "a").data[0, 0, 0] == 1
    assert mode_fuse(a, b, c, "b").data[0, 0, 0] == 2
    assert mode_fuse(a, b, c, "c").data[0, 0, 0] == 3


def test_mode_fuse_permutation_invariant_with_majority():
    rng = np.random.Generator(np.random.Philox(6))
    a = rng.integers(0, 6, (5, 5, 5), dtype=np.uint8)
    b = a.copy()
    c = rng.integers(0, 6, (5, 5, 5), dtype=np.uint8)
    ref = mode_fuse(_vol(a), _vol(b), _vol(c)).data
    for pa, pb, pc in ((a, c, b), (c, a, b), (b, c, a)):
        assert np.array_equal(mode_fuse(_vol(pa), _vol(pb), _vol(pc)).data, ref)


def test_mode_fuse_validation():
    a = _vol(np.zeros((2, 2, 2)))
    bad = _vol(np.zeros((2, 2, 3)))
    with pytest.raises(ShapeError):
        mode_fuse(a, a, bad)
    with pytest.raises(ConfigError):
        mode_fuse(a, a, a, tiebreak="d")


def test_fill_holes_single_interior_voxel():
    arr = np.full((5, 5, 5), 2, dtype=np.uint8)
    arr[2, 2, 2] = 0
    out = fill_holes_3d(_vol(arr))
    assert out.data[2, 2, 2] == 2
    assert (out.data == 2).all()


def test_fill_holes_leaves_border_tunnel():
    arr = np.full((5, 5, 5), 2, dtype=np.uint8)
    arr[2, 2, :3] = 0  # tunnel from x=0 border to the center
    out = fill_holes_3d(_vol(arr))
    assert np.array_equal(out.data, arr)


def test_fill_holes_majority_and_tie_rule():
    arr = np.full((3, 3, 3), 4, dtype=np.uint8)
    arr[1, 1, 1] = 0
    # 3 neighbors of class 2, 3 of class 4: tie goes to the lower id
    arr[0, 1, 1] = arr[2, 1, 1] = arr[1, 0, 1] = 2
    out = fill_holes_3d(_vol(arr))
    assert out.data[1, 1, 1] == 2
    # 4 of class 5 vs 2 of class 2: majority wins
    arr2 = np.full((3, 3, 3), 5, dtype=np.uint8)
    arr2[1, 1, 1] = 0
    arr2[0, 1, 1] = arr2[2, 1, 1] = 2
    assert fill_holes_3d(_vol(arr2)).data[1, 1, 1] == 5


def test_fill_holes_fills_large_cavity_inward():
    arr = np.full((9, 9, 9), 3, dtype=np.uint8)
    arr[2:7, 2:7, 2:7] = 0
    out = fill_holes_3d(_vol(arr))
    assert (out.data == 3).all()


def test_fill_holes_idempotent_and_preserving_on_random_volumes():
    for seed in range(5):
        rng = np.random.Generator(np.random.Philox(seed))
        arr = rng.integers(0, 6, (12, 12, 12), dtype=np.uint8)
        vol = _vol(arr)
        once = fill_holes_3d(vol)
        twice = fill_holes_3d(once)
        assert np.array_equal(once.data, twice.data)
        nonbg = arr != 0
        assert np.array_equal(once.data[nonbg], arr[nonbg])
