"""Class-incremental learning with selectively compressed exemplars.

Exemplars are compressed by keeping a class-discriminative crop (located
via activation maps) at full resolution and downsampling the rest, which
frees budget for many more replay exemplars. A learnable-activation mask
branch adapts the maps across phases through a one-step bilevel update.
"""

__version__ = "0.1.0"

from .cam import (
    ActivationMap,
    BBox,
    BinaryMask,
    bbox_for_image,
    cam_from_features,
    compute_cam,
    mask_to_bbox,
    threshold_mask,
)
from .compression import (
    CompressedExemplar,
    Image,
    compress,
    downsample_full,
    memory_cost,
    reconstruct,
)
from .errors import CimxError
from .model import Branch, ModelSpec, ModelState, build_model, expand_classifier
from .pau import PAUParams, init_pau_as_relu, pau_forward, pau_gradient

__all__ = [
    "ActivationMap",
    "BBox",
    "BinaryMask",
    "Branch",
    "CimxError",
    "CompressedExemplar",
    "Image",
    "ModelSpec",
    "ModelState",
    "PAUParams",
    "bbox_for_image",
    "build_model",
    "cam_from_features",
    "compress",
    "compute_cam",
    "downsample_full",
    "expand_classifier",
    "init_pau_as_relu",
    "mask_to_bbox",
    "memory_cost",
    "pau_forward",
    "pau_gradient",
    "reconstruct",
    "threshold_mask",
]
