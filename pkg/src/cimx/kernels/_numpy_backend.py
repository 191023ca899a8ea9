"""Pure-NumPy implementations of the pixel kernels (fallback backend)."""

import numpy as np

from ._mapping import nn_indices


def nn_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize of an (H, W) or (H, W, C) array."""
    ih = nn_indices(img.shape[0], out_h)
    iw = nn_indices(img.shape[1], out_w)
    return np.ascontiguousarray(img[ih[:, None], iw[None, :]])


def mask_bbox(mask: np.ndarray):
    """Tight inclusive bounding box (h0, w0, h1, w1) of the set pixels.

    Returns None when the mask has no set pixel.
    """
    rows = mask.any(axis=1)
    if not rows.any():
        return None
    cols = mask.any(axis=0)
    h0 = int(np.argmax(rows))
    h1 = int(len(rows) - 1 - np.argmax(rows[::-1]))
    w0 = int(np.argmax(cols))
    w1 = int(len(cols) - 1 - np.argmax(cols[::-1]))
    return h0, w0, h1, w1
