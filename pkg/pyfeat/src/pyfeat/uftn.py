"""UFTN tensor file format: the wire format shared with the pose core.

Layout: magic "UFTN", u32 LE version (1), u32 LE ndims, ndims u32 LE dims,
then row-major float32 LE payload. Feature maps add a JSON sidecar with the
same basename holding {patch_size_px, image_w_px, image_h_px, source_tag}.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"UFTN"
VERSION = 1


def write_tensor(arr: np.ndarray, path: str | Path) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to write non-finite tensor")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    version, ndims = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    dims = struct.unpack_from(f"<{ndims}I", blob, 12)
    payload = blob[12 + 4 * ndims:]
    arr = np.frombuffer(payload, dtype="<f4")
    return arr.reshape(dims).copy()


def write_feature_map(values: np.ndarray, path: str | Path, patch_size_px: int,
                      image_w_px: int, image_h_px: int, source_tag: str) -> None:
    """Write a (grid_h, grid_w, channels) map plus its metadata sidecar."""
    if values.ndim != 3:
        raise ValueError(f"feature map must be 3-D, got {values.shape}")
    write_tensor(values, path)
    meta = {
        "patch_size_px": int(patch_size_px),
        "image_w_px": int(image_w_px),
        "image_h_px": int(image_h_px),
        "source_tag": source_tag,
    }
    Path(path).with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n")
