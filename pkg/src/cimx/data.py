"""Dataset ingestion and a synthetic desk-scale dataset generator.

Real datasets are directory-per-class image trees (``train/<class>/*`` and
``test/<class>/*``). The synthetic generator renders each class as a
colored textured patch at a random position over shared background noise,
small enough to train on a CPU while giving activation maps something to
localize.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PilImage

from .compression import Image, from_uint8
from .errors import DatasetError

# ten well-separated foreground colors
PALETTE = np.array(
    [
        [220, 60, 60],
        [60, 200, 60],
        [70, 90, 230],
        [230, 200, 60],
        [200, 70, 200],
        [60, 210, 210],
        [240, 140, 50],
        [140, 80, 220],
        [110, 190, 110],
        [230, 110, 150],
    ],
    dtype=np.float64,
)


def render_sample(rng: np.random.Generator, class_id: int, size: int) -> np.ndarray:
    """One uint8 image: class-colored striped patch on gray noise."""
    bg = rng.integers(100, 156, size=(size, size, 1))
    img = np.repeat(bg, 3, axis=2).astype(np.float64)
    img += rng.normal(0.0, 6.0, size=img.shape)

    side = int(rng.integers(max(4, size // 4), max(6, int(size / 2.6)) + 1))
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    color = PALETTE[class_id % len(PALETTE)]

    patch = np.tile(color, (side, side, 1)).astype(np.float64)
    stripes = np.arange(side) // max(2, side // 4) % 2 == 0
    if class_id % 2 == 0:
        patch[stripes] *= 0.55
    else:
        patch[:, stripes] *= 0.55
    patch += rng.normal(0.0, 8.0, size=patch.shape)
    img[top : top + side, left : left + side] = patch
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic_dataset(
    root,
    classes: int = 10,
    train_per_class: int = 100,
    test_per_class: int = 20,
    size: int = 64,
    seed: int = 0,
) -> Path:
    """Write a directory-per-class PNG tree; returns the root path."""
    root = Path(root)
    for split, per_class in (("train", train_per_class), ("test", test_per_class)):
        for class_id in range(classes):
            rng = np.random.default_rng([seed, classes, size, class_id, split == "test"])
            class_dir = root / split / f"class_{class_id:02d}"
            class_dir.mkdir(parents=True, exist_ok=True)
            for i in range(per_class):
                arr = render_sample(rng, class_id, size)
                PilImage.fromarray(arr).save(class_dir / f"{i:04d}.png")
    return root


def _load_image(path: Path, image_size: int) -> np.ndarray:
    try:
        with PilImage.open(path) as img:
            img = img.convert("RGB")
            if img.size != (image_size, image_size):
                img = img.resize((image_size, image_size), PilImage.BILINEAR)
            return np.asarray(img, dtype=np.uint8)
    except DatasetError:
        raise
    except Exception as exc:
        raise DatasetError(f"unreadable image file {path}: {exc}") from exc


def ingest_dataset(path, image_size: int) -> dict[str, dict[str, list[np.ndarray]]]:
    """Read ``train``/``test`` class trees into uint8 arrays.

    Class and file order is sorted, so repeated ingestion yields identical
    sample ordering. Raises DatasetError on missing splits, empty classes,
    or unreadable files.
    """
    path = Path(path)
    out: dict[str, dict[str, list[np.ndarray]]] = {}
    for split in ("train", "test"):
        split_dir = path / split
        if not split_dir.is_dir():
            raise DatasetError(f"missing split directory {split_dir}")
        classes = sorted(d.name for d in split_dir.iterdir() if d.is_dir())
        if not classes:
            raise DatasetError(f"no class directories under {split_dir}")
        per_class: dict[str, list[np.ndarray]] = {}
        for name in classes:
            files = sorted(f for f in (split_dir / name).iterdir() if f.is_file())
            if not files:
                raise DatasetError(f"class directory {split_dir / name} is empty")
            per_class[name] = [_load_image(f, image_size) for f in files]
        out[split] = per_class
    return out


def to_images(arrays: list[np.ndarray], label: int, prefix: str) -> list[Image]:
    """Wrap uint8 arrays as float images carrying their global label."""
    return [
        Image(pixels=from_uint8(arr), label=label, source_id=f"{prefix}/{i:05d}")
        for i, arr in enumerate(arrays)
    ]
