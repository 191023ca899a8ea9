import importlib

import numpy as np
import pytest

from cimx import kernels
from cimx.kernels import _numpy_backend


def nn_resize_oracle(img, oh, ow):
    """Independent double-loop nearest resize with exact integer index math."""
    H, W = img.shape[:2]
    out = np.empty((oh, ow) + img.shape[2:], dtype=img.dtype)
    for i in range(oh):
        sh = ((2 * i + 1) * H) // (2 * oh)
        for j in range(ow):
            sw = ((2 * j + 1) * W) // (2 * ow)
            out[i, j] = img[sh, sw]
    return out


def bbox_oracle(mask):
    coords = [(i, j) for i in range(mask.shape[0]) for j in range(mask.shape[1]) if mask[i, j]]
    if not coords:
        return None
    hs = [c[0] for c in coords]
    ws = [c[1] for c in coords]
    return min(hs), min(ws), max(hs), max(ws)


def test_nn_indices_identity():
    assert np.array_equal(kernels.nn_indices(7, 7), np.arange(7))


def test_nn_indices_bounds(rng):
    for _ in range(200):
        src, dst = rng.integers(1, 100, 2)
        idx = kernels.nn_indices(int(src), int(dst))
        assert idx.min() >= 0 and idx.max() < src
        assert np.all(np.diff(idx) >= 0)


@pytest.mark.parametrize("dtype", [np.uint8, np.float32, np.float64])
def test_nn_resize_matches_oracle(rng, dtype):
    for _ in range(60):
        h, w = rng.integers(1, 33, 2)
        oh, ow = rng.integers(1, 33, 2)
        if dtype == np.uint8:
            img = rng.integers(0, 256, (int(h), int(w), 3)).astype(dtype)
        else:
            img = rng.random((int(h), int(w), 3)).astype(dtype)
        got = kernels.nn_resize(img, int(oh), int(ow))
        assert got.dtype == img.dtype
        np.testing.assert_array_equal(got, nn_resize_oracle(img, int(oh), int(ow)))


def test_nn_resize_2d(rng):
    img = rng.random((9, 5))
    got = kernels.nn_resize(img, 4, 11)
    assert got.shape == (4, 11)
    np.testing.assert_array_equal(got, nn_resize_oracle(img, 4, 11))


def test_mask_bbox_matches_oracle(rng):
    for _ in range(300):
        h, w = rng.integers(1, 20, 2)
        mask = rng.random((int(h), int(w))) < 0.15
        assert kernels.mask_bbox(mask) == bbox_oracle(mask)


def test_mask_bbox_empty():
    assert kernels.mask_bbox(np.zeros((5, 5), dtype=bool)) is None


def test_backends_bit_identical(rng):
    cython_backend = pytest.importorskip("cimx.kernels._cython_backend")
    for _ in range(50):
        h, w = rng.integers(1, 40, 2)
        oh, ow = rng.integers(1, 40, 2)
        img = rng.integers(0, 256, (int(h), int(w), 3)).astype(np.uint8)
        np.testing.assert_array_equal(
            cython_backend.nn_resize(img, int(oh), int(ow)),
            _numpy_backend.nn_resize(img, int(oh), int(ow)),
        )
        mask = rng.random((int(h), int(w))) < 0.2
        assert cython_backend.mask_bbox(mask) == _numpy_backend.mask_bbox(mask)


def test_backend_reports_name():
    assert kernels.BACKEND in ("cython", "numpy")
