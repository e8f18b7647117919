"""Scene directory layout, cross-validation, and the pipeline configuration.

A scene directory holds one instance to estimate:

    intrinsics.json          {fx, fy, cx, cy, width, height}
    depth.uftn | depth.png   meters (float32 tensor) or u16 millimeters + scale sidecar
    mask.png | mask.uftn     nonzero = object
    mesh.obj                 reference mesh (rescaled to canonical frame at load)
    rgb.png                  optional, needed by real feature extractors
    gt_pose.json             optional ground truth (synthetic scenes)
    synth.json               optional synthetic-provider parameters
    features/                optional precomputed feature files (files mode)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .coarse import CoarseConfig, Observation
from .errors import ValidationError
from .geometry import (CameraIntrinsics, SimilarityTransform, TriangleMesh,
                       load_obj, read_depth, read_intrinsics, read_mask)
from .imageio import read_png_rgb
from .providers import (FeatureProvider, FilesFeatureProvider,
                        SubprocessFeatureProvider, SyntheticFeatureProvider,
                        SyntheticProviderConfig)
from .refine import DEFAULT_LEARNING_RATES, LossWeights
from .solver import RansacConfig
from .tensorio import CombineWeights


@dataclass
class PipelineConfig:
    """Every knob of the pipeline, serializable for reproducibility."""

    # fusion / matching
    alpha_d1: float = 0.0
    alpha_d2: float = 0.7
    alpha_sd: float = 0.3
    pca_dims: int = 64
    m: int = 50
    mask_min_frac: float = 0.5
    # coarse stage
    coarse_iters: int = 2
    monotone_accept: bool = True
    ransac_max_iters: int = 1000
    ransac_sample_size: int = 4
    ransac_inlier_threshold_rel: float = 0.05
    ransac_confidence_stop: float = 0.999
    # refinement stage
    refine_steps: int = 80
    refine_samples: int = 512
    refine_stride: int = 2            # target-cloud subsampling
    loss_weights: dict = field(default_factory=lambda: asdict(LossWeights()))
    learning_rates: dict = field(default_factory=lambda: dict(DEFAULT_LEARNING_RATES))
    lr_schedule: str = "cosine"
    # provider
    provider_mode: str = "synthetic"  # synthetic | files | subprocess
    provider_command: list = field(default_factory=list)
    # seeds
    seed: int = 0

    def validate(self) -> "PipelineConfig":
        if self.provider_mode not in ("synthetic", "files", "subprocess"):
            raise ValidationError(f"unknown provider mode {self.provider_mode!r}")
        if self.provider_mode == "subprocess" and not self.provider_command:
            raise ValidationError("subprocess provider needs provider_command")
        if self.refine_stride < 1 or self.refine_samples < 8:
            raise ValidationError("refinement sampling parameters out of range")
        self.coarse_config().validate()
        self.weights().validate()
        return self

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "PipelineConfig":
        cfg = PipelineConfig()
        for key, value in obj.items():
            if not hasattr(cfg, key):
                raise ValidationError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
        return cfg.validate()

    @staticmethod
    def load(path: str | Path) -> "PipelineConfig":
        return PipelineConfig.from_json(json.loads(Path(path).read_text()))

    def coarse_config(self) -> CoarseConfig:
        return CoarseConfig(
            iters=self.coarse_iters,
            m=self.m,
            pca_dims=self.pca_dims,
            weights=CombineWeights(self.alpha_d1, self.alpha_d2, self.alpha_sd),
            ransac=RansacConfig(
                max_iters=self.ransac_max_iters,
                sample_size=self.ransac_sample_size,
                inlier_threshold_rel=self.ransac_inlier_threshold_rel,
                confidence_stop=self.ransac_confidence_stop,
                seed=self.seed,
            ),
            mask_min_frac=self.mask_min_frac,
            monotone_accept=self.monotone_accept,
            seed=self.seed,
        )

    def weights(self) -> LossWeights:
        return LossWeights(**self.loss_weights)


@dataclass
class SceneDirectory:
    path: Path
    intrinsics: CameraIntrinsics
    depth: np.ndarray
    mask: np.ndarray
    mesh: TriangleMesh
    rgb: np.ndarray | None = None
    gt_pose: SimilarityTransform | None = None
    synth_provider: SyntheticProviderConfig | None = None

    def observation(self) -> Observation:
        return Observation(depth=self.depth, mask=self.mask,
                           intrinsics=self.intrinsics, frame_id=self.path.name,
                           rgb=self.rgb).validate()


def _find(path: Path, names: list[str]) -> Path | None:
    for name in names:
        p = path / name
        if p.exists():
            return p
    return None


def load_scene(path: str | Path) -> SceneDirectory:
    """Load and cross-validate a scene directory."""
    root = Path(path)
    if not root.is_dir():
        raise ValidationError(f"scene directory not found: {root}")
    intr_path = root / "intrinsics.json"
    if not intr_path.exists():
        raise ValidationError(f"missing intrinsics file: {intr_path}")
    k = read_intrinsics(intr_path)

    depth_path = _find(root, ["depth.uftn", "depth.png"])
    if depth_path is None:
        raise ValidationError(f"missing depth map (depth.uftn or depth.png) in {root}")
    depth = read_depth(depth_path)
    mask_path = _find(root, ["mask.png", "mask.uftn"])
    if mask_path is None:
        raise ValidationError(f"missing mask (mask.png or mask.uftn) in {root}")
    mask = read_mask(mask_path)
    mesh_path = root / "mesh.obj"
    if not mesh_path.exists():
        raise ValidationError(f"missing reference mesh: {mesh_path}")
    mesh = load_obj(mesh_path).normalized_to_canonical()

    if depth.shape != (k.height, k.width):
        raise ValidationError(
            f"depth {depth.shape} does not match intrinsics "
            f"{(k.height, k.width)} in {root}")
    if mask.shape != depth.shape:
        raise ValidationError(f"mask {mask.shape} does not match depth {depth.shape}")

    rgb = None
    rgb_path = root / "rgb.png"
    if rgb_path.exists():
        rgb = read_png_rgb(rgb_path)
        if rgb.shape[:2] != depth.shape:
            raise ValidationError(f"rgb {rgb.shape[:2]} does not match depth")

    gt = None
    gt_path = root / "gt_pose.json"
    if gt_path.exists():
        gt = SimilarityTransform.from_json(json.loads(gt_path.read_text()))

    synth_cfg = None
    synth_path = root / "synth.json"
    if synth_path.exists():
        meta = json.loads(synth_path.read_text())
        synth_cfg = SyntheticProviderConfig.from_json(meta.get("provider", {}))

    return SceneDirectory(path=root, intrinsics=k, depth=depth, mask=mask,
                          mesh=mesh, rgb=rgb, gt_pose=gt, synth_provider=synth_cfg)


def make_provider(scene: SceneDirectory, cfg: PipelineConfig,
                  workdir: Path | None = None) -> FeatureProvider:
    if cfg.provider_mode == "synthetic":
        if scene.gt_pose is None or scene.synth_provider is None:
            raise ValidationError(
                "synthetic provider needs gt_pose.json and synth.json in the scene")
        return SyntheticFeatureProvider(scene.gt_pose, scene.synth_provider)
    if cfg.provider_mode == "files":
        feat_dir = scene.path / "features"
        return FilesFeatureProvider(feat_dir)
    work = workdir or (scene.path / "provider_io")
    return SubprocessFeatureProvider(list(cfg.provider_command), work)
