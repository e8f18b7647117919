"""Dense tensor files, patch-grid feature maps, weighted fusion and joint PCA.

The on-disk tensor format ("UFTN") is deliberately minimal: a magic tag,
a version, the dimension list, then a row-major float32 payload, all
little-endian. Feature maps add a JSON sidecar with the patch geometry so a
grid can be mapped back onto image pixels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"UFTN"
VERSION = 1
MAX_DIMS = 8
MAX_ELEMENTS = 1 << 31


def write_tensor(data: np.ndarray, path: str | Path) -> None:
    """Write a float32 tensor to `path` in UFTN format."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > MAX_DIMS:
        raise ValidationError(f"tensor has {arr.ndim} dims, limit is {MAX_DIMS}")
    if any(d <= 0 for d in arr.shape):
        raise ValidationError(f"tensor dimensions must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("tensor contains non-finite values")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a UFTN tensor. Raises FormatError with a byte offset on bad input."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(blob) < 12:
        raise FormatError("truncated header", offset=len(blob))
    version, ndims = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if ndims == 0 or ndims > MAX_DIMS:
        raise FormatError(f"dimension count {ndims} out of range 1..{MAX_DIMS}", offset=8)
    dims_end = 12 + 4 * ndims
    if len(blob) < dims_end:
        raise FormatError("truncated dimension list", offset=len(blob))
    dims = struct.unpack_from(f"<{ndims}I", blob, 12)
    count = 1
    for i, d in enumerate(dims):
        if d == 0:
            raise FormatError(f"zero dimension at index {i}", offset=12 + 4 * i)
        count *= d
        if count > MAX_ELEMENTS:
            raise FormatError(f"element count overflow ({count} > {MAX_ELEMENTS})",
                              offset=12 + 4 * i)
    payload = blob[dims_end:]
    expected = 4 * count
    if len(payload) != expected:
        raise FormatError(
            f"payload is {len(payload)} bytes, expected {expected}", offset=dims_end)
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise FormatError("non-finite payload value", offset=dims_end + 4 * bad)
    return arr.astype(np.float32, copy=True)


@dataclass(frozen=True)
class FeatureMap:
    """A grid_h x grid_w grid of per-patch feature vectors over an image."""

    values: np.ndarray  # (grid_h, grid_w, channels) float32
    patch_size_px: int
    image_w_px: int
    image_h_px: int
    source_tag: str = "unknown"

    @property
    def grid_h(self) -> int:
        return int(self.values.shape[0])

    @property
    def grid_w(self) -> int:
        return int(self.values.shape[1])

    @property
    def channels(self) -> int:
        return int(self.values.shape[2])

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    def flat(self) -> np.ndarray:
        """Patch vectors as (n_patches, channels), row-major patch order."""
        return self.values.reshape(-1, self.channels)

    def validate(self) -> "FeatureMap":
        v = self.values
        if v.ndim != 3:
            raise ValidationError(f"feature map values must be 3-D, got shape {v.shape}")
        if self.channels < 1:
            raise ValidationError("feature map needs at least one channel")
        if self.patch_size_px < 1 or self.image_w_px < 1 or self.image_h_px < 1:
            raise ValidationError("patch size and image dimensions must be positive")
        if self.grid_h * self.patch_size_px > self.image_h_px + self.patch_size_px:
            raise ValidationError("patch grid extends past the image height")
        if self.grid_w * self.patch_size_px > self.image_w_px + self.patch_size_px:
            raise ValidationError("patch grid extends past the image width")
        if not np.all(np.isfinite(v)):
            raise ValidationError("feature map contains non-finite values")
        return self


def _sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def write_feature_map(fm: FeatureMap, path: str | Path) -> None:
    """Write the grid tensor plus its JSON metadata sidecar."""
    fm.validate()
    write_tensor(fm.values, path)
    meta = {
        "patch_size_px": fm.patch_size_px,
        "image_w_px": fm.image_w_px,
        "image_h_px": fm.image_h_px,
        "source_tag": fm.source_tag,
    }
    _sidecar_path(path).write_text(json.dumps(meta, sort_keys=True) + "\n")


def read_feature_map(path: str | Path) -> FeatureMap:
    values = read_tensor(path)
    if values.ndim != 3:
        raise FormatError(f"feature map tensor must be 3-D, got shape {values.shape}")
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise ValidationError(f"missing feature map sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    fm = FeatureMap(
        values=values,
        patch_size_px=int(meta["patch_size_px"]),
        image_w_px=int(meta["image_w_px"]),
        image_h_px=int(meta["image_h_px"]),
        source_tag=str(meta.get("source_tag", "unknown")),
    )
    return fm.validate()


@dataclass(frozen=True)
class CombineWeights:
    """Mixing coefficients for the 2D feature sources, keyed by source tag."""

    alpha_d1: float = 0.0
    alpha_d2: float = 0.7
    alpha_sd: float = 0.3

    def validate(self) -> "CombineWeights":
        if min(self.alpha_d1, self.alpha_d2, self.alpha_sd) < 0:
            raise ValidationError("feature weights must be non-negative")
        if max(self.alpha_d1, self.alpha_d2, self.alpha_sd) <= 0:
            raise ValidationError("at least one feature weight must be positive")
        return self

    def weight_for(self, source_tag: str) -> float:
        known = {"dinov1": self.alpha_d1, "dinov2": self.alpha_d2, "sd": self.alpha_sd}
        return known.get(source_tag, 1.0)


def normalize_rows(x: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Scale each row to unit L2 norm; all-zero rows stay zero."""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(norms > eps, norms, 1.0)
    return np.where(norms > eps, x / safe, 0.0)


def combine_features(maps: list[tuple[FeatureMap, float]]) -> FeatureMap:
    """Fuse several feature maps of one image into a single map.

    Each retained map's patch vectors are scaled to unit L2 norm, multiplied
    by their weight, and concatenated along channels. Zero-weight maps are
    dropped; zero patch vectors stay zero rather than becoming NaN.
    """
    retained = [(fm, w) for fm, w in maps if w != 0.0]
    if not retained:
        raise ValidationError("no maps retained: all weights are zero or list is empty")
    for fm, w in retained:
        fm.validate()
        if w < 0:
            raise ValidationError(f"negative weight {w} for source {fm.source_tag!r}")
    first = retained[0][0]
    for fm, _ in retained[1:]:
        if (fm.grid_h, fm.grid_w) != (first.grid_h, first.grid_w):
            raise ValidationError(
                f"grid mismatch: {fm.source_tag!r} is {fm.grid_h}x{fm.grid_w}, "
                f"{first.source_tag!r} is {first.grid_h}x{first.grid_w}")
    parts = []
    for fm, w in retained:
        flat = fm.flat().astype(np.float64)
        parts.append(w * normalize_rows(flat))
    fused = np.concatenate(parts, axis=1).astype(np.float32)
    tag = "+".join(fm.source_tag for fm, _ in retained)
    return FeatureMap(
        values=fused.reshape(first.grid_h, first.grid_w, -1),
        patch_size_px=first.patch_size_px,
        image_w_px=first.image_w_px,
        image_h_px=first.image_h_px,
        source_tag=tag,
    )


def joint_pca(a: np.ndarray, b: np.ndarray, dims: int,
              rank_rtol: float = 1e-6) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project two vector sets onto a shared PCA basis fitted on their union.

    The basis is fitted on mean-centered data, but vectors are projected
    without re-centering (y = W x) so the map is a pure rotation of the
    ambient space restricted to `dims` components: pairwise distances and
    cosine similarities survive when dims equals the input channel count.

    If the centered data has rank below `dims` the output shrinks to the
    actual rank. Returns (projected_a, projected_b, basis) with basis of
    shape (effective_dims, channels).
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValidationError(f"incompatible stacks {a.shape} vs {b.shape}")
    channels = a.shape[1]
    if dims < 1:
        raise ValidationError("dims must be positive")
    if dims > channels:
        raise ValidationError(f"dims {dims} exceeds channel count {channels}")
    stacked = np.concatenate([a, b], axis=0).astype(np.float64)
    centered = stacked - stacked.mean(axis=0, keepdims=True)
    # SVD of centered data gives principal directions in Vt; no covariance blowup.
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    if sv.size == 0 or sv[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(sv > sv[0] * rank_rtol))
    eff = max(1, min(dims, rank)) if rank > 0 else 1
    basis = vt[:eff]
    return a.astype(np.float64) @ basis.T, b.astype(np.float64) @ basis.T, basis


def pca_reduce_pair(a: FeatureMap, b: FeatureMap, dims: int) -> tuple[FeatureMap, FeatureMap]:
    """Jointly PCA-reduce a reference/target feature map pair to `dims` channels.

    The output channel count can be lower than `dims` when the joint data is
    rank-deficient; callers should read it back from the returned maps.
    """
    a.validate()
    b.validate()
    if a.channels != b.channels:
        raise ValidationError(f"channel mismatch {a.channels} vs {b.channels}")
    pa, pb, _ = joint_pca(a.flat(), b.flat(), dims)
    eff = pa.shape[1]

    def rebuild(fm: FeatureMap, flat: np.ndarray) -> FeatureMap:
        return replace(fm, values=flat.astype(np.float32).reshape(fm.grid_h, fm.grid_w, eff))

    return rebuild(a, pa), rebuild(b, pb)
