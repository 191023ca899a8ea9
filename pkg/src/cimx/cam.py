"""Class activation maps, hard thresholding, and tight bounding boxes.

The map for an image is the classifier-weighted sum of its spatial feature
block, min-max normalized to [0, 1] and upsampled (nearest-neighbor) to the
image size. Thresholding keeps strictly-greater pixels; the bounding box is
the tight cover of the surviving pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import kernels
from .errors import EmptyMaskError
from .model import Branch, ModelState

DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class BBox:
    """Inclusive integer pixel box; area = (h_max-h_min+1) * (w_max-w_min+1)."""

    h_min: int
    w_min: int
    h_max: int
    w_max: int

    def __post_init__(self):
        if not (0 <= self.h_min <= self.h_max and 0 <= self.w_min <= self.w_max):
            raise ValueError(f"malformed bbox {self}")

    @classmethod
    def full(cls, height: int, width: int) -> "BBox":
        return cls(0, 0, height - 1, width - 1)

    @property
    def height(self) -> int:
        return self.h_max - self.h_min + 1

    @property
    def width(self) -> int:
        return self.w_max - self.w_min + 1

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.h_min, self.h_max + 1), slice(self.w_min, self.w_max + 1)

    def contains(self, other: "BBox") -> bool:
        return (
            self.h_min <= other.h_min
            and self.w_min <= other.w_min
            and self.h_max >= other.h_max
            and self.w_max >= other.w_max
        )


@dataclass(frozen=True)
class ActivationMap:
    """Normalized activation heatmap at image resolution.

    ``degenerate`` marks maps whose raw activations were constant; their
    values are all zero and callers should fall back to the full-image box.
    """

    values: np.ndarray
    source_branch: Branch
    degenerate: bool = False


@dataclass(frozen=True)
class BinaryMask:
    values: np.ndarray

    @property
    def empty(self) -> bool:
        return not bool(self.values.any())


def normalize_activation(raw: np.ndarray) -> tuple[np.ndarray, bool]:
    """Min-max normalize a raw activation map to [0, 1].

    Returns (map, degenerate). A constant map (peak-to-peak within
    DEGENERATE_TOL) normalizes to all zeros with the degenerate flag set so
    no fabricated region survives thresholding.
    """
    raw = np.asarray(raw, dtype=np.float64)
    lo = float(raw.min())
    hi = float(raw.max())
    if hi - lo <= DEGENERATE_TOL:
        return np.zeros_like(raw), True
    return (raw - lo) / (hi - lo), False


def cam_from_features(features: np.ndarray, class_weight: np.ndarray) -> tuple[np.ndarray, bool]:
    """Weighted channel sum of a (C, h, w) feature block, normalized.

    This is the map at feature resolution; see compute_cam for the
    image-resolution version.
    """
    features = np.asarray(features, dtype=np.float64)
    class_weight = np.asarray(class_weight, dtype=np.float64)
    raw = np.tensordot(class_weight, features, axes=1)
    return normalize_activation(raw)


def compute_cam(image, label: int, model: ModelState, branch: Branch) -> ActivationMap:
    """Activation map of one image for its own class, at image resolution.

    ``image`` is an (H, W, C) array in [0, 1] or any object with a
    ``pixels`` attribute holding one. The label must be a class the
    classifier already covers.
    """
    pixels = np.asarray(getattr(image, "pixels", image), dtype=np.float32)
    if not 0 <= label < model.class_count:
        raise ValueError(f"label {label} outside the {model.class_count} known classes")
    net = model.net
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))[None]
        x = x.to(dtype=next(net.parameters()).dtype)
        features = net.spatial_features(x, branch)[0].cpu().numpy()
        weight = net.classifier.weight[label].detach().cpu().numpy()
    values, degenerate = cam_from_features(features, weight)
    values = kernels.nn_resize(values, pixels.shape[0], pixels.shape[1])
    return ActivationMap(values=values, source_branch=branch, degenerate=degenerate)


def threshold_mask(cam: ActivationMap | np.ndarray, threshold: float) -> BinaryMask:
    """Hard mask of pixels with activation strictly above ``threshold``."""
    values = cam.values if isinstance(cam, ActivationMap) else np.asarray(cam)
    return BinaryMask(values=values > threshold)


def mask_to_bbox(mask: BinaryMask | np.ndarray) -> BBox:
    """Tight bounding box over the set pixels; EmptyMaskError if none."""
    values = mask.values if isinstance(mask, BinaryMask) else np.asarray(mask)
    box = kernels.mask_bbox(values)
    if box is None:
        raise EmptyMaskError("mask has no set pixel")
    h0, w0, h1, w1 = box
    return BBox(h_min=h0, w_min=w0, h_max=h1, w_max=w1)


def bbox_for_image(image, label: int, model: ModelState, branch: Branch, threshold: float) -> BBox:
    """CAM -> threshold -> bbox, with the full-image fallback.

    Falls back to the whole image when the map is degenerate or the
    threshold leaves no pixel, so the caller always gets a usable box (the
    fallback simply means no compression for that image).
    """
    pixels = np.asarray(getattr(image, "pixels", image))
    cam = compute_cam(image, label, model, branch)
    if cam.degenerate:
        return BBox.full(pixels.shape[0], pixels.shape[1])
    mask = threshold_mask(cam, threshold)
    if mask.empty:
        return BBox.full(pixels.shape[0], pixels.shape[1])
    return mask_to_bbox(mask)
