"""Binary exemplar records and the on-disk archive.

Record layout (little-endian): magic ``CIMX``, version u8, label u32,
height u16, width u16, downsample ratio f32, bbox as 4xu16
(h_min, w_min, h_max, w_max), then crop bytes and background bytes, both
8-bit, planar per channel with row-major planes. The channel count is
recovered from the record length. The archive directory holds one record
file per exemplar plus a text manifest listing phase, class, cost, and a
sha256 checksum for each record; all writes go through temp-then-rename.
"""

from __future__ import annotations

import hashlib
import os
import struct
import threading
from pathlib import Path

import numpy as np

from .cam import BBox
from .compression import CompressedExemplar, downsampled_shape, memory_cost
from .errors import CorruptStore
from .memory import ExemplarStore, StoredExemplar

MAGIC = b"CIMX"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBIHHf4H")
HEADER_SIZE = _HEADER.size
BBOX_OFFSET = 17
BBOX_SIZE = 8
MANIFEST_NAME = "manifest.txt"

_write_lock = threading.Lock()


def serialize_exemplar(ex: CompressedExemplar) -> bytes:
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        ex.label,
        ex.height,
        ex.width,
        np.float32(ex.ratio),
        ex.bbox.h_min,
        ex.bbox.w_min,
        ex.bbox.h_max,
        ex.bbox.w_max,
    )
    crop = np.ascontiguousarray(ex.crop.transpose(2, 0, 1))
    background = np.ascontiguousarray(ex.background.transpose(2, 0, 1))
    return header + crop.tobytes() + background.tobytes()


def deserialize_exemplar(data: bytes, source_id: str = "") -> CompressedExemplar:
    if len(data) < HEADER_SIZE:
        raise CorruptStore("record shorter than header")
    magic, version, label, height, width, ratio, h0, w0, h1, w1 = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptStore(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptStore(f"unsupported record version {version}")
    ratio = float(np.float32(ratio))
    try:
        bbox = BBox(h_min=h0, w_min=w0, h_max=h1, w_max=w1)
    except ValueError as exc:
        raise CorruptStore(str(exc)) from exc
    if h1 >= height or w1 >= width:
        raise CorruptStore(f"bbox {bbox} exceeds image {height}x{width}")
    bh, bw = downsampled_shape(height, width, ratio)
    plane = bbox.area + bh * bw
    payload = len(data) - HEADER_SIZE
    if plane == 0 or payload % plane != 0:
        raise CorruptStore("record length inconsistent with header")
    channels = payload // plane
    if channels not in (1, 3):
        raise CorruptStore(f"unsupported channel count {channels}")
    crop_bytes = bbox.area * channels
    crop = (
        np.frombuffer(data, dtype=np.uint8, count=crop_bytes, offset=HEADER_SIZE)
        .reshape(channels, bbox.height, bbox.width)
        .transpose(1, 2, 0)
    )
    background = (
        np.frombuffer(data, dtype=np.uint8, count=bh * bw * channels, offset=HEADER_SIZE + crop_bytes)
        .reshape(channels, bh, bw)
        .transpose(1, 2, 0)
    )
    return CompressedExemplar(
        bbox=bbox,
        crop=np.ascontiguousarray(crop),
        background=np.ascontiguousarray(background),
        ratio=ratio,
        label=label,
        cost=memory_cost(bbox, height, width, ratio),
        height=height,
        width=width,
        source_id=source_id,
    )


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_store(directory, store: ExemplarStore) -> Path:
    """Write all stored exemplars plus the manifest; returns the manifest path."""
    directory = Path(directory)
    lines = [f"format cimx-archive {FORMAT_VERSION}"]
    with _write_lock:
        for class_id in store.classes():
            for i, se in enumerate(store.class_exemplars(class_id)):
                rel = Path("records") / str(class_id) / f"{i:05d}.cimx"
                data = serialize_exemplar(se.exemplar)
                digest = hashlib.sha256(data).hexdigest()
                (directory / rel).parent.mkdir(parents=True, exist_ok=True)
                _atomic_write(directory / rel, data)
                lines.append(
                    f"exemplar phase={se.phase} class={class_id} "
                    f"cost={se.exemplar.cost!r} checksum=sha256:{digest} "
                    f"source={se.exemplar.source_id or '-'} file={rel.as_posix()}"
                )
        manifest = directory / MANIFEST_NAME
        _atomic_write(manifest, ("\n".join(lines) + "\n").encode())
    return manifest


def load_store(directory) -> ExemplarStore:
    """Read an archive back, validating every record checksum."""
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise CorruptStore(f"missing manifest in {directory}")
    lines = manifest.read_text().splitlines()
    if not lines or not lines[0].startswith("format cimx-archive"):
        raise CorruptStore("manifest missing format header")
    if lines[0].split()[-1] != str(FORMAT_VERSION):
        raise CorruptStore(f"unsupported archive version: {lines[0]}")
    per_class: dict[int, list[StoredExemplar]] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        fields = dict(part.split("=", 1) for part in line.split()[1:])
        data = (directory / fields["file"]).read_bytes()
        digest = "sha256:" + hashlib.sha256(data).hexdigest()
        if digest != fields["checksum"]:
            raise CorruptStore(f"checksum mismatch for {fields['file']}")
        source = fields.get("source", "-")
        ex = deserialize_exemplar(data, source_id="" if source == "-" else source)
        class_id = int(fields["class"])
        if abs(ex.cost - float(fields["cost"])) > 1e-9:
            raise CorruptStore(f"cost mismatch for {fields['file']}")
        per_class.setdefault(class_id, []).append(
            StoredExemplar(exemplar=ex, phase=int(fields["phase"]), checksum=digest.split(":", 1)[1])
        )
    store = ExemplarStore()
    for class_id, items in per_class.items():
        store._by_class[class_id] = items
    return store
