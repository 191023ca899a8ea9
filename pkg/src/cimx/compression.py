"""Selective downsampling of pixels outside a bounding box, with exact
memory accounting.

A compressed exemplar stores the full-resolution crop inside the box plus a
nearest-neighbor downsampled background covering the whole image (side
scale 1/sqrt(ratio), rounded up). Reconstruction upsamples the background
and pastes the crop back, so pixels inside the box are bit-exact.

Pixel data is held as 8-bit per channel; training converts to floats in
[0, 1]. Cost is measured in original-image units: an uncompressed image
costs 1, and a box covering fraction b of the pixels costs
1 - (1 - 1/ratio) * (1 - b).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .cam import BBox
from .errors import CorruptStore, InvalidRatio


@dataclass(frozen=True)
class Image:
    """Pixel array (H, W, C) of floats in [0, 1] with its class label."""

    pixels: np.ndarray
    label: int
    source_id: str = ""

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class CompressedExemplar:
    """Storable compressed form: box, full-res crop, downsampled background."""

    bbox: BBox
    crop: np.ndarray
    background: np.ndarray
    ratio: float
    label: int
    cost: float
    height: int
    width: int
    source_id: str = ""


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32)) / np.float32(255.0)


def downsampled_shape(height: int, width: int, ratio: float) -> tuple[int, int]:
    """Background grid dimensions: each side scaled by 1/sqrt(ratio), rounded up."""
    if ratio < 1.0:
        raise InvalidRatio(f"downsampling ratio {ratio} must be >= 1")
    scale = math.sqrt(ratio)
    return math.ceil(height / scale), math.ceil(width / scale)


def downsample_full(image: Image, ratio: float) -> Image:
    """Whole-image nearest-neighbor downsample; pixel count shrinks by ~ratio."""
    oh, ow = downsampled_shape(image.height, image.width, ratio)
    return Image(
        pixels=kernels.nn_resize(image.pixels, oh, ow),
        label=image.label,
        source_id=image.source_id,
    )


def memory_cost(bbox: BBox, height: int, width: int, ratio: float) -> float:
    """Cost of a compressed image in original-image units, in (0, 1]."""
    if ratio < 1.0:
        raise InvalidRatio(f"downsampling ratio {ratio} must be >= 1")
    _check_bbox(bbox, height, width)
    box_fraction = bbox.area / (height * width)
    return 1.0 - (1.0 - 1.0 / ratio) * (1.0 - box_fraction)


def count_stored_pixels(bbox: BBox, height: int, width: int, ratio: float) -> int:
    """Number of information-bearing stored pixels for one exemplar.

    Crop pixels plus background cells whose nearest-neighbor source lies
    outside the box. Cells sampling inside the box are bit-exact duplicates
    of crop pixels (reconstructible from the crop), so they carry no
    information even though the background array physically includes them.
    """
    _check_bbox(bbox, height, width)
    bh, bw = downsampled_shape(height, width, ratio)
    ih = kernels.nn_indices(height, bh)
    iw = kernels.nn_indices(width, bw)
    inside_h = int(np.count_nonzero((ih >= bbox.h_min) & (ih <= bbox.h_max)))
    inside_w = int(np.count_nonzero((iw >= bbox.w_min) & (iw <= bbox.w_max)))
    return bbox.area + bh * bw - inside_h * inside_w


def compress(image: Image, bbox: BBox, ratio: float) -> CompressedExemplar:
    """Quantize to 8-bit and keep the crop at full resolution, the rest
    downsampled. Pixels inside the box are stored untouched."""
    _check_bbox(bbox, image.height, image.width)
    u8 = to_uint8(image.pixels)
    bh, bw = downsampled_shape(image.height, image.width, ratio)
    return CompressedExemplar(
        bbox=bbox,
        crop=np.ascontiguousarray(u8[bbox.slices]),
        background=kernels.nn_resize(u8, bh, bw),
        ratio=float(ratio),
        label=image.label,
        cost=memory_cost(bbox, image.height, image.width, ratio),
        height=image.height,
        width=image.width,
        source_id=image.source_id,
    )


def reconstruct(ex: CompressedExemplar) -> Image:
    """Upsample the background and paste the crop; returns floats in [0, 1]."""
    return Image(pixels=from_uint8(reconstruct_uint8(ex)), label=ex.label, source_id=ex.source_id)


def reconstruct_uint8(ex: CompressedExemplar) -> np.ndarray:
    expected_bg = downsampled_shape(ex.height, ex.width, ex.ratio)
    if ex.crop.shape[:2] != (ex.bbox.height, ex.bbox.width):
        raise CorruptStore(f"crop shape {ex.crop.shape[:2]} does not match bbox {ex.bbox}")
    if ex.background.shape[:2] != expected_bg:
        raise CorruptStore(f"background shape {ex.background.shape[:2]}, expected {expected_bg}")
    if ex.crop.shape[2:] != ex.background.shape[2:]:
        raise CorruptStore("crop and background channel counts differ")
    out = kernels.nn_resize(ex.background, ex.height, ex.width)
    out[ex.bbox.slices] = ex.crop
    return out


def compress_pixels_u8(pixels_u8: np.ndarray, bbox: BBox, ratio: float) -> np.ndarray:
    """One-shot compressed view of an 8-bit image (used by augmentation)."""
    _check_bbox(bbox, pixels_u8.shape[0], pixels_u8.shape[1])
    bh, bw = downsampled_shape(pixels_u8.shape[0], pixels_u8.shape[1], ratio)
    out = kernels.nn_resize(kernels.nn_resize(pixels_u8, bh, bw), pixels_u8.shape[0], pixels_u8.shape[1])
    out[bbox.slices] = pixels_u8[bbox.slices]
    return out


def _check_bbox(bbox: BBox, height: int, width: int):
    if bbox.h_max >= height or bbox.w_max >= width:
        raise ValueError(f"bbox {bbox} exceeds image {height}x{width}")
