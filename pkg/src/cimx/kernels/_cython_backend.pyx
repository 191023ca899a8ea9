# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled pixel kernels. Index math mirrors _mapping.nn_indices exactly."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused pix_t:
    cnp.uint8_t
    cnp.float32_t
    cnp.float64_t


cdef inline Py_ssize_t _src_index(Py_ssize_t i, Py_ssize_t src, Py_ssize_t dst) nogil:
    return ((2 * i + 1) * src) // (2 * dst)


def _nn_resize_3d(pix_t[:, :, ::1] src, pix_t[:, :, ::1] out):
    cdef Py_ssize_t H = src.shape[0], W = src.shape[1], C = src.shape[2]
    cdef Py_ssize_t oh = out.shape[0], ow = out.shape[1]
    cdef Py_ssize_t i, j, c, sh, sw
    with nogil:
        for i in range(oh):
            sh = _src_index(i, H, oh)
            for j in range(ow):
                sw = _src_index(j, W, ow)
                for c in range(C):
                    out[i, j, c] = src[sh, sw, c]


def nn_resize(img, int out_h, int out_w):
    """Nearest-neighbor resize of an (H, W) or (H, W, C) array."""
    if out_h < 1 or out_w < 1:
        raise ValueError("resize lengths must be >= 1")
    squeeze = img.ndim == 2
    src = np.ascontiguousarray(img if not squeeze else img[:, :, None])
    out = np.empty((out_h, out_w, src.shape[2]), dtype=src.dtype)
    cdef cnp.uint8_t[:, :, ::1] src_u8, out_u8
    cdef cnp.float32_t[:, :, ::1] src_f32, out_f32
    cdef cnp.float64_t[:, :, ::1] src_f64, out_f64
    if src.dtype == np.uint8:
        src_u8 = src
        out_u8 = out
        _nn_resize_3d(src_u8, out_u8)
    elif src.dtype == np.float32:
        src_f32 = src
        out_f32 = out
        _nn_resize_3d(src_f32, out_f32)
    elif src.dtype == np.float64:
        src_f64 = src
        out_f64 = out
        _nn_resize_3d(src_f64, out_f64)
    else:
        raise TypeError(f"unsupported dtype {src.dtype}")
    return out[:, :, 0] if squeeze else out


def mask_bbox(mask):
    """Tight inclusive bounding box (h0, w0, h1, w1), or None if empty."""
    cdef cnp.uint8_t[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t H = m.shape[0], W = m.shape[1]
    cdef Py_ssize_t h0 = -1, h1 = -1, w0 = W, w1 = -1
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(H):
            for j in range(W):
                if m[i, j]:
                    if h0 < 0:
                        h0 = i
                    h1 = i
                    if j < w0:
                        w0 = j
                    if j > w1:
                        w1 = j
    if h0 < 0:
        return None
    return int(h0), int(w0), int(h1), int(w1)
