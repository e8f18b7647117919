"""Cameras, similarity transforms, meshes, clouds, depth lifting, grid mapping.

Camera convention used everywhere: right-handed, +z into the scene, image
origin at the top-left corner, u rightward, v downward. A pixel with integer
index (ix, iy) covers the square [ix, ix+1) x [iy, iy+1) and its center sits
at (ix + 0.5, iy + 0.5).

Canonical object frame: meshes are rescaled at load time into a frame
centered at the origin with the tight bounding-box diagonal equal to one,
y up. All object-space coordinates below are in that frame.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import EmptyCloudError, FormatError, ValidationError
from .tensorio import FeatureMap, read_tensor, write_tensor

CANONICAL_UP = np.array([0.0, 1.0, 0.0])


# ---------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def validate(self) -> "CameraIntrinsics":
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point outside the image")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image dimensions must be positive")
        return self

    def project(self, points: np.ndarray) -> np.ndarray:
        """Project camera-frame points (N,3) to pixel coordinates (N,2)."""
        p = np.asarray(points, dtype=np.float64)
        z = p[:, 2]
        u = self.fx * p[:, 0] / z + self.cx
        v = self.fy * p[:, 1] / z + self.cy
        return np.stack([u, v], axis=1)

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @staticmethod
    def from_json(obj: dict) -> "CameraIntrinsics":
        try:
            return CameraIntrinsics(
                fx=float(obj["fx"]), fy=float(obj["fy"]),
                cx=float(obj["cx"]), cy=float(obj["cy"]),
                width=int(obj["width"]), height=int(obj["height"]),
            ).validate()
        except KeyError as e:
            raise ValidationError(f"intrinsics JSON missing field {e}") from e


def read_intrinsics(path: str | Path) -> CameraIntrinsics:
    return CameraIntrinsics.from_json(json.loads(Path(path).read_text()))


def write_intrinsics(k: CameraIntrinsics, path: str | Path) -> None:
    Path(path).write_text(json.dumps(k.to_json(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# rotations and similarity transforms


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rot_x(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def rot_y(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def rot_z(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def axis_angle_to_matrix(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula; w is axis * angle in radians."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        k = skew(w)
        return np.eye(3) + k + 0.5 * (k @ k)
    k = skew(w / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation via quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (Frobenius) via SVD, det forced to +1."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=np.float64))
    rot = u @ vt
    if np.linalg.det(rot) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        rot = u @ vt
    return rot


def rotation_geodesic_deg(r1: np.ndarray, r2: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees, via the trace formula."""
    tr = float(np.trace(np.asarray(r1).T @ np.asarray(r2)))
    c = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def rotation_angle_stable_deg(r1: np.ndarray, r2: np.ndarray) -> float:
    """Same geodesic angle, computed from the Frobenius gap.

    ||R1 - R2||_F = 2*sqrt(2)*sin(theta/2) exactly, which keeps precision for
    angles far below what the arccos-of-trace form can resolve. Use this when
    asserting near-zero rotation errors.
    """
    fro = float(np.linalg.norm(np.asarray(r1, dtype=np.float64) - np.asarray(r2, dtype=np.float64)))
    s = np.clip(fro / (2.0 * np.sqrt(2.0)), 0.0, 1.0)
    return float(np.degrees(2.0 * np.arcsin(s)))


@dataclass(frozen=True)
class SimilarityTransform:
    """p -> s * r @ p + t with r a proper rotation and s > 0."""

    r: np.ndarray
    t: np.ndarray
    s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "r", np.asarray(self.r, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        object.__setattr__(self, "s", float(self.s))

    @staticmethod
    def identity() -> "SimilarityTransform":
        return SimilarityTransform(np.eye(3), np.zeros(3), 1.0)

    def validate(self, tol: float = 1e-6) -> "SimilarityTransform":
        if not np.all(np.isfinite(self.r)) or not np.all(np.isfinite(self.t)):
            raise ValidationError("transform has non-finite entries")
        if self.s <= 0:
            raise ValidationError(f"scale must be positive, got {self.s}")
        gap = np.abs(self.r.T @ self.r - np.eye(3)).max()
        if gap > tol:
            raise ValidationError(f"rotation not orthonormal (gap {gap:.2e})")
        if abs(np.linalg.det(self.r) - 1.0) > tol:
            raise ValidationError("rotation determinant is not +1")
        return self

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.s * (p @ self.r.T) + self.t

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """self after other: (self o other).apply(p) == self.apply(other.apply(p))."""
        r = orthonormalize(self.r @ other.r)
        s = self.s * other.s
        t = self.s * (self.r @ other.t) + self.t
        return SimilarityTransform(r, t, s).validate()

    def invert(self) -> "SimilarityTransform":
        r = orthonormalize(self.r.T)
        s = 1.0 / self.s
        t = -s * (r @ self.t)
        return SimilarityTransform(r, t, s).validate()

    def to_json(self) -> dict:
        return {"R": [float(x) for x in self.r.ravel()],
                "T": [float(x) for x in self.t],
                "s": float(self.s)}

    @staticmethod
    def from_json(obj: dict) -> "SimilarityTransform":
        r = np.array(obj["R"], dtype=np.float64).reshape(3, 3)
        t = np.array(obj["T"], dtype=np.float64)
        return SimilarityTransform(r, t, float(obj.get("s", 1.0))).validate()


def compose(a: SimilarityTransform, b: SimilarityTransform) -> SimilarityTransform:
    return a.compose(b)


def invert(a: SimilarityTransform) -> SimilarityTransform:
    return a.invert()


# ---------------------------------------------------------------------------
# point clouds and meshes


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N,3) float64, meters
    features: np.ndarray | None = None  # (N,C)

    def __post_init__(self):
        object.__setattr__(self, "points",
                           np.asarray(self.points, dtype=np.float64).reshape(-1, 3))
        if self.features is not None:
            object.__setattr__(self, "features", np.asarray(self.features))

    def __len__(self) -> int:
        return self.points.shape[0]

    def validate(self) -> "PointCloud":
        if not np.all(np.isfinite(self.points)):
            raise ValidationError("point cloud has non-finite coordinates")
        if self.features is not None and self.features.shape[0] != len(self):
            raise ValidationError("feature row count does not match point count")
        return self

    def transformed(self, tf: SimilarityTransform) -> "PointCloud":
        return PointCloud(tf.apply(self.points), self.features)

    def bbox_diagonal(self) -> float:
        if len(self) == 0:
            return 0.0
        ext = self.points.max(axis=0) - self.points.min(axis=0)
        return float(np.linalg.norm(ext))


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (V,3) float64
    faces: np.ndarray     # (F,3) int32
    colors: np.ndarray | None = None  # (V,3) float in [0,1]

    def __post_init__(self):
        object.__setattr__(self, "vertices",
                           np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "faces",
                           np.asarray(self.faces, dtype=np.int32).reshape(-1, 3))
        if self.colors is not None:
            object.__setattr__(self, "colors",
                               np.asarray(self.colors, dtype=np.float64).reshape(-1, 3))

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def validate(self) -> "TriangleMesh":
        if self.n_vertices < 3 or self.n_faces < 1:
            raise ValidationError("mesh needs at least 3 vertices and 1 face")
        if self.faces.min() < 0 or self.faces.max() >= self.n_vertices:
            raise ValidationError("face index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValidationError("mesh has non-finite vertices")
        if self.colors is not None and self.colors.shape[0] != self.n_vertices:
            raise ValidationError("color row count does not match vertex count")
        return self

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def drop_degenerate_faces(self, min_area: float = 1e-14) -> "TriangleMesh":
        keep = self.face_areas() > min_area
        return replace(self, faces=self.faces[keep])

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def diameter(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def normalized_to_canonical(self) -> "TriangleMesh":
        """Recenter at the origin and scale the bounding-box diagonal to one."""
        lo, hi = self.bbox()
        center = (lo + hi) / 2.0
        diag = float(np.linalg.norm(hi - lo))
        if diag <= 0:
            raise ValidationError("mesh has zero extent")
        return replace(self, vertices=(self.vertices - center) / diag)


def load_obj(path: str | Path) -> TriangleMesh:
    """Load an OBJ file: vertices, faces, optional per-vertex colors.

    Polygon faces are fan-triangulated; zero-area faces are dropped.
    """
    verts: list[list[float]] = []
    colors: list[list[float]] = []
    faces: list[list[int]] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            nums = [float(x) for x in parts[1:]]
            if len(nums) < 3:
                raise FormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
            verts.append(nums[:3])
            colors.append(nums[3:6] if len(nums) >= 6 else [0.7, 0.7, 0.7])
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                idx.append(i - 1 if i > 0 else len(verts) + i)
            if len(idx) < 3:
                raise FormatError(f"{path}:{lineno}: face needs 3 vertices")
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts or not faces:
        raise FormatError(f"{path}: no usable geometry")
    has_color = any(c != [0.7, 0.7, 0.7] for c in colors)
    mesh = TriangleMesh(
        vertices=np.array(verts),
        faces=np.array(faces, dtype=np.int32),
        colors=np.array(colors) if has_color else None,
    ).validate()
    return mesh.drop_degenerate_faces()


def save_obj(mesh: TriangleMesh, path: str | Path) -> None:
    lines = []
    for i, v in enumerate(mesh.vertices):
        if mesh.colors is not None:
            c = mesh.colors[i]
            lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}")
        else:
            lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# depth, masks


def validate_depth(depth: np.ndarray) -> np.ndarray:
    d = np.asarray(depth, dtype=np.float32)
    if d.ndim != 2:
        raise ValidationError(f"depth map must be 2-D, got shape {d.shape}")
    if not np.all(np.isfinite(d)) or d.min() < 0:
        raise ValidationError("depth must be finite and non-negative")
    return d


def validate_mask(mask: np.ndarray, depth: np.ndarray | None = None) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValidationError(f"mask must be 2-D, got shape {m.shape}")
    if depth is not None and m.shape != depth.shape:
        raise ValidationError(f"mask shape {m.shape} does not match depth {depth.shape}")
    return m


def _png_chunks(kind: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + kind + payload
            + struct.pack(">I", zlib.crc32(kind + payload)))


def write_png_gray(arr: np.ndarray, path: str | Path, bitdepth: int = 8) -> None:
    """Minimal grayscale PNG writer (8- or 16-bit), no external deps needed here."""
    h, w = arr.shape
    if bitdepth == 16:
        data = np.asarray(arr, dtype=">u2")
        raw = b"".join(b"\x00" + data[y].tobytes() for y in range(h))
    else:
        data = np.asarray(arr, dtype=np.uint8)
        raw = b"".join(b"\x00" + data[y].tobytes() for y in range(h))
    header = struct.pack(">IIBBBBB", w, h, bitdepth, 0, 0, 0, 0)
    blob = (b"\x89PNG\r\n\x1a\n" + _png_chunks(b"IHDR", header)
            + _png_chunks(b"IDAT", zlib.compress(raw)) + _png_chunks(b"IEND", b""))
    Path(path).write_bytes(blob)


def read_png_gray(path: str | Path) -> np.ndarray:
    from PIL import Image

    img = Image.open(path)
    arr = np.array(img)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr


def write_depth(depth: np.ndarray, path: str | Path) -> None:
    """Write depth in meters. `.uftn` stores float32; `.png` stores u16 millimeters."""
    depth = validate_depth(depth)
    p = Path(path)
    if p.suffix == ".png":
        mm = np.clip(np.round(depth * 1000.0), 0, 65535).astype(np.uint16)
        write_png_gray(mm, p, bitdepth=16)
        p.with_suffix(".json").write_text(json.dumps({"scale": 0.001}) + "\n")
    else:
        write_tensor(depth, p)


def read_depth(path: str | Path) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".png":
        raw = read_png_gray(p).astype(np.float32)
        sidecar = p.with_suffix(".json")
        scale = 0.001
        if sidecar.exists():
            scale = float(json.loads(sidecar.read_text()).get("scale", 0.001))
        return validate_depth(raw * scale)
    arr = read_tensor(p)
    if arr.ndim != 2:
        raise FormatError(f"depth tensor must be 2-D, got shape {arr.shape}")
    return validate_depth(arr)


def write_mask(mask: np.ndarray, path: str | Path) -> None:
    m = validate_mask(mask)
    p = Path(path)
    if p.suffix == ".png":
        write_png_gray(m.astype(np.uint8) * 255, p, bitdepth=8)
    else:
        write_tensor(m.astype(np.float32), p)


def read_mask(path: str | Path) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".png":
        return read_png_gray(p) != 0
    arr = read_tensor(p)
    if arr.ndim != 2:
        raise FormatError(f"mask tensor must be 2-D, got shape {arr.shape}")
    return arr != 0


# ---------------------------------------------------------------------------
# lifting and patch-grid mapping


@dataclass(frozen=True)
class LiftResult:
    cloud: PointCloud
    kept: np.ndarray     # indices into the input pixel list
    dropped: np.ndarray  # indices with invalid depth


def lift_pixels(depth: np.ndarray, k: CameraIntrinsics,
                pixels: np.ndarray) -> LiftResult:
    """Back-project sub-pixel image coordinates through nearest-neighbor depth.

    Pixels whose nearest depth sample is invalid (zero) are dropped and
    reported in `dropped`. Raises EmptyCloudError when nothing survives.
    """
    depth = validate_depth(depth)
    k.validate()
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if px.shape[0] == 0:
        raise EmptyCloudError("no pixels to lift")
    u, v = px[:, 0], px[:, 1]
    if (u < 0).any() or (u >= k.width).any() or (v < 0).any() or (v >= k.height).any():
        raise ValidationError("pixel coordinates outside the image")
    ix = np.clip(np.floor(u).astype(int), 0, depth.shape[1] - 1)
    iy = np.clip(np.floor(v).astype(int), 0, depth.shape[0] - 1)
    z = depth[iy, ix].astype(np.float64)
    good = z > 0
    if not good.any():
        raise EmptyCloudError("all sampled depths are invalid")
    zg = z[good]
    pts = np.stack([
        (u[good] - k.cx) * zg / k.fx,
        (v[good] - k.cy) * zg / k.fy,
        zg,
    ], axis=1)
    idx = np.arange(px.shape[0])
    return LiftResult(PointCloud(pts), kept=idx[good], dropped=idx[~good])


def patch_to_pixel(p: int, fm: FeatureMap) -> tuple[float, float]:
    """Center of the pixel footprint of flat patch index p (row-major)."""
    if not (0 <= p < fm.n_patches):
        raise ValidationError(f"patch index {p} out of range 0..{fm.n_patches - 1}")
    row, col = divmod(p, fm.grid_w)
    u = (col + 0.5) * fm.image_w_px / fm.grid_w
    v = (row + 0.5) * fm.image_h_px / fm.grid_h
    return (u, v)


def pixel_to_patch(u: float, v: float, fm: FeatureMap) -> int:
    """Flat patch index whose footprint contains pixel (u, v)."""
    col = min(fm.grid_w - 1, max(0, int(u * fm.grid_w / fm.image_w_px)))
    row = min(fm.grid_h - 1, max(0, int(v * fm.grid_h / fm.image_h_px)))
    return row * fm.grid_w + col


def mask_to_cloud(depth: np.ndarray, mask: np.ndarray, k: CameraIntrinsics,
                  stride: int = 1) -> PointCloud:
    """Lift every stride-th valid masked pixel (sampled at pixel centers)."""
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    depth = validate_depth(depth)
    mask = validate_mask(mask, depth)
    sub = np.zeros_like(mask)
    sub[::stride, ::stride] = True
    sel = mask & sub & (depth > 0)
    iy, ix = np.nonzero(sel)
    if iy.size == 0:
        raise EmptyCloudError("mask selects no valid depth pixels")
    z = depth[iy, ix].astype(np.float64)
    u = ix + 0.5
    v = iy + 0.5
    pts = np.stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z], axis=1)
    return PointCloud(pts)
