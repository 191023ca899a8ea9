"""Single source of truth for the nearest-neighbor index mapping.

Every resize in the package (NumPy kernel, Cython kernel, and the torch
gather used during training) routes through this mapping so hard and soft
compression paths sample identical pixels.
"""

import numpy as np


def nn_indices(src_len: int, dst_len: int) -> np.ndarray:
    """Source index for each destination position of a 1-D nearest resize.

    Uses the centered mapping floor((i + 0.5) * src / dst), evaluated in
    exact integer arithmetic so ties never depend on float rounding.
    """
    if src_len < 1 or dst_len < 1:
        raise ValueError("resize lengths must be >= 1")
    i = np.arange(dst_len, dtype=np.int64)
    return ((2 * i + 1) * src_len) // (2 * dst_len)
