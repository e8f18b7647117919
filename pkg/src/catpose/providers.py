"""Feature providers: the boundary where pre-trained models plug in.

The geometric core never loads a neural network. It asks a provider for
per-patch 2D features of an image view and per-point 3D features of a cloud,
and everything downstream (fusion, PCA, matching, losses) is model agnostic.

Three providers ship here:

  - SyntheticFeatureProvider: emits features derived from true canonical
    surface coordinates; the test and synthetic-scene workhorse. Supports
    Gaussian feature noise and a corruption mode where reference-view noise
    grows with the gap between the rendered pose and the ground-truth pose.
  - FilesFeatureProvider: replays precomputed feature files from a scene
    directory (written by an external extractor).
  - SubprocessFeatureProvider: drives an external extractor process over
    line-delimited JSON, exchanging file paths.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ProviderError, ValidationError
from .geometry import CameraIntrinsics, SimilarityTransform
from .tensorio import FeatureMap, read_feature_map, read_tensor, write_tensor


@dataclass(frozen=True)
class ViewImage:
    """What a provider gets to look at for one features2d call."""

    kind: str                      # "target" or "render"
    depth: np.ndarray              # (H,W) float32 meters
    mask: np.ndarray               # (H,W) bool
    intrinsics: CameraIntrinsics
    pose: SimilarityTransform | None = None  # model->camera for renders
    rgb: np.ndarray | None = None  # (H,W,3) float in [0,1], for real extractors
    tag: str = ""                  # stable id, e.g. "target" or "v1_it0"


class FeatureProvider:
    """Provider contract. Implementations must be deterministic per input
    within one session and must emit finite features."""

    def features2d(self, view: ViewImage) -> list[FeatureMap]:
        raise NotImplementedError

    def features3d(self, points: np.ndarray, role: str,
                   frame_pose: SimilarityTransform | None = None) -> np.ndarray:
        """Per-point features (N,C). `role` is "reference" (points in the
        canonical model frame) or "target" (points in the camera frame;
        `frame_pose` is the alignment pose a real extractor should use to
        bring them into the model frame before encoding)."""
        raise NotImplementedError

    def close(self) -> None:
        pass


def _content_seed(*parts) -> int:
    """Stable 64-bit seed derived from input content, for per-call noise."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, np.ndarray):
            h.update(np.ascontiguousarray(part).tobytes())
        else:
            h.update(str(part).encode())
    return int.from_bytes(h.digest(), "little")


def _orthonormal_embedding(dim_in: int, dim_out: int, seed: int) -> np.ndarray:
    """Fixed (dim_out, dim_in) matrix with orthonormal columns."""
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(dim_out, dim_in))
    q, _ = np.linalg.qr(m)
    return q[:, :dim_in]


@dataclass
class SyntheticProviderConfig:
    patch_size_px: int = 4
    noise_sigma: float = 0.0          # base feature noise
    corruption_per_deg: float = 0.0   # extra reference noise per degree of pose gap
    embed_dim: int = 4                # 4 = coords + constant; >4 = orthogonal lift
    feature_offset: float = 1.0       # homogeneous channel so cosine keeps radius
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "patch_size_px": self.patch_size_px,
            "noise_sigma": self.noise_sigma,
            "corruption_per_deg": self.corruption_per_deg,
            "embed_dim": self.embed_dim,
            "feature_offset": self.feature_offset,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(obj: dict) -> "SyntheticProviderConfig":
        cfg = SyntheticProviderConfig()
        for key in cfg.to_json():
            if key in obj:
                setattr(cfg, key, type(getattr(cfg, key))(obj[key]))
        return cfg


class SyntheticFeatureProvider(FeatureProvider):
    """Oracle provider: features are canonical surface coordinates.

    For a rendered reference view the canonical coordinate of each patch
    center comes from the render's own depth and pose. For the target frame
    it comes from the observed depth and the ground-truth pose this provider
    was built with, which makes matching exact when noise is zero.
    """

    def __init__(self, gt_pose: SimilarityTransform,
                 cfg: SyntheticProviderConfig | None = None):
        self.gt_pose = gt_pose
        self.cfg = cfg or SyntheticProviderConfig()
        if self.cfg.embed_dim < 4:
            raise ValidationError("embed_dim must be at least 4")
        if self.cfg.embed_dim > 4:
            self._embed = _orthonormal_embedding(4, self.cfg.embed_dim,
                                                 self.cfg.seed ^ 0x5EED)
        else:
            self._embed = None

    def _encode(self, canonical: np.ndarray) -> np.ndarray:
        # homogeneous channel: cosine similarity between [c, k] vectors stays
        # sensitive to radial position, so argmax picks the nearest coordinate
        ones = np.full((canonical.shape[0], 1), self.cfg.feature_offset)
        f = np.concatenate([canonical, ones], axis=1)
        if self._embed is not None:
            f = f @ self._embed.T
        return f

    def _noise_sigma_for(self, view: ViewImage) -> float:
        sigma = self.cfg.noise_sigma
        if view.kind == "render" and view.pose is not None and self.cfg.corruption_per_deg > 0:
            from .geometry import rotation_geodesic_deg

            gap = rotation_geodesic_deg(view.pose.r, self.gt_pose.r)
            sigma = sigma + self.cfg.corruption_per_deg * gap
        return sigma

    def features2d(self, view: ViewImage) -> list[FeatureMap]:
        k = view.intrinsics
        ps = self.cfg.patch_size_px
        grid_h = k.height // ps
        grid_w = k.width // ps
        if grid_h < 1 or grid_w < 1:
            raise ValidationError("patch size larger than the image")
        pose = self.gt_pose if view.kind == "target" else view.pose
        if pose is None:
            raise ProviderError("render view without a pose")
        inv = pose.invert()
        us = (np.arange(grid_w) + 0.5) * k.width / grid_w
        vs = (np.arange(grid_h) + 0.5) * k.height / grid_h
        ug, vg = np.meshgrid(us, vs)
        ix = np.clip(ug.astype(int), 0, k.width - 1)
        iy = np.clip(vg.astype(int), 0, k.height - 1)
        z = view.depth[iy, ix].astype(np.float64)
        valid = (z > 0) & view.mask[iy, ix]
        cam = np.stack([(ug - k.cx) * z / k.fx, (vg - k.cy) * z / k.fy, z], axis=-1)
        canon = inv.apply(cam.reshape(-1, 3))
        feats = self._encode(canon)
        sigma = self._noise_sigma_for(view)
        if sigma > 0:
            rng = np.random.default_rng(_content_seed(
                self.cfg.seed, view.kind, view.tag, np.round(z, 6),
                np.round(pose.r, 9), np.round(pose.t, 9)))
            feats = feats + rng.normal(scale=sigma, size=feats.shape)
        feats[~valid.reshape(-1)] = 0.0
        values = feats.reshape(grid_h, grid_w, -1).astype(np.float32)
        return [FeatureMap(values=values, patch_size_px=ps,
                           image_w_px=k.width, image_h_px=k.height,
                           source_tag="synthetic").validate()]

    def features3d(self, points: np.ndarray, role: str,
                   frame_pose: SimilarityTransform | None = None) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if role == "target":
            canon = self.gt_pose.invert().apply(pts)
        elif role == "reference":
            canon = pts
        else:
            raise ValidationError(f"unknown cloud role {role!r}")
        feats = self._encode(canon)
        if self.cfg.noise_sigma > 0:
            rng = np.random.default_rng(_content_seed(
                self.cfg.seed, "3d", role, np.round(pts, 9)))
            feats = feats + rng.normal(scale=self.cfg.noise_sigma, size=feats.shape)
        return feats


class FilesFeatureProvider(FeatureProvider):
    """Replays feature files from a directory.

    Layout: `target.<source>.uftn` for the target frame, `ref_<tag>.<source>.uftn`
    for rendered reference views (tag as passed in ViewImage.tag),
    `feat3d_reference.uftn` / `feat3d_target.uftn` for point features.
    """

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        if not self.dir.is_dir():
            raise ProviderError(f"feature directory not found: {self.dir}")

    def _load_all(self, stem: str) -> list[FeatureMap]:
        files = sorted(self.dir.glob(f"{stem}.*.uftn"))
        if not files:
            raise ProviderError(f"no feature files matching {stem}.*.uftn in {self.dir}")
        return [read_feature_map(f) for f in files]

    def features2d(self, view: ViewImage) -> list[FeatureMap]:
        stem = "target" if view.kind == "target" else f"ref_{view.tag}"
        return self._load_all(stem)

    def features3d(self, points: np.ndarray, role: str,
                   frame_pose: SimilarityTransform | None = None) -> np.ndarray:
        path = self.dir / f"feat3d_{role}.uftn"
        if not path.exists():
            raise ProviderError(f"missing 3D feature file {path}")
        feats = read_tensor(path)
        n = np.asarray(points).reshape(-1, 3).shape[0]
        if feats.shape[0] != n:
            raise ProviderError(
                f"{path} has {feats.shape[0]} rows for a cloud of {n} points")
        return feats


class SubprocessFeatureProvider(FeatureProvider):
    """Drives an extractor process over the line-JSON file-path protocol.

    Requests: {"id": n, "op": "features2d", "image": png_path, "out": uftn_path}
              {"id": n, "op": "features3d", "cloud": uftn_path, "out": uftn_path}
    Responses: {"id": n, "ok": true} or {"id": n, "ok": false, "error": "..."}.
    One outstanding request at a time.
    """

    def __init__(self, command: list[str], workdir: str | Path):
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self._next_id = 0
        try:
            self.proc = subprocess.Popen(
                command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True)
        except OSError as e:
            raise ProviderError(f"could not start provider {command}: {e}") from e

    def _request(self, payload: dict) -> dict:
        if self.proc.poll() is not None:
            raise ProviderError("provider process has exited")
        self._next_id += 1
        payload = {"id": self._next_id, **payload}
        try:
            self.proc.stdin.write(json.dumps(payload) + "\n")
            self.proc.stdin.flush()
            line = self.proc.stdout.readline()
        except (BrokenPipeError, OSError) as e:
            raise ProviderError(f"provider pipe failed: {e}") from e
        if not line:
            raise ProviderError("provider closed its output stream")
        try:
            resp = json.loads(line)
        except json.JSONDecodeError as e:
            raise ProviderError(f"provider sent invalid JSON: {line!r}") from e
        if resp.get("id") != payload["id"]:
            raise ProviderError(f"provider answered id {resp.get('id')}, "
                                f"expected {payload['id']}")
        if not resp.get("ok"):
            raise ProviderError(f"provider error: {resp.get('error', 'unknown')}")
        return resp

    def features2d(self, view: ViewImage) -> list[FeatureMap]:
        if view.rgb is None:
            raise ProviderError("subprocess provider needs an RGB image for features2d")
        from .imageio import write_png_rgb

        img_path = self.workdir / f"view_{view.tag or 'target'}.png"
        out_path = self.workdir / f"feat_{view.tag or 'target'}.uftn"
        write_png_rgb(view.rgb, img_path)
        self._request({"op": "features2d", "image": str(img_path), "out": str(out_path)})
        if not out_path.exists():
            raise ProviderError(f"provider reported ok but {out_path} is missing")
        return [read_feature_map(out_path)]

    def features3d(self, points: np.ndarray, role: str,
                   frame_pose: SimilarityTransform | None = None) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if role == "target" and frame_pose is not None:
            pts = frame_pose.invert().apply(pts)  # align into the model frame
        cloud_path = self.workdir / f"cloud_{role}.uftn"
        out_path = self.workdir / f"feat3d_{role}.uftn"
        write_tensor(pts.astype(np.float32), cloud_path)
        self._request({"op": "features3d", "cloud": str(cloud_path), "out": str(out_path)})
        if not out_path.exists():
            raise ProviderError(f"provider reported ok but {out_path} is missing")
        return read_tensor(out_path)

    def close(self) -> None:
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
                self.proc.wait(timeout=5)
            except Exception:
                self.proc.kill()
