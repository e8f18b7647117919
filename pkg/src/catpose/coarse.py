"""Iterative keypoint-level coarse pose estimation.

For each of four canonical reference views: render the reference mesh, pull
2D features for the render and the target frame, fuse and jointly
PCA-reduce them, pick cycle-consistent correspondences, lift both sides
into camera space through their depth maps, and solve a robust similarity
transform. The camera-space alignment composed with the render pose is the
object pose. Each view is then iterated: re-render at the current estimate,
re-match, re-solve; the update is kept only if its confidence does not drop
(configurable). The view with the highest final confidence wins.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (EmptyCloudError, EstimationFailedError, NoConsensusError,
                     ProviderError, ValidationError)
from .geometry import (CameraIntrinsics, SimilarityTransform, TriangleMesh,
                       lift_pixels, patch_to_pixel)
from .matching import (CorrespondenceSet, cyclical_distances,
                       foreground_patches, score_matrix,
                       select_correspondences, view_confidence)
from .providers import FeatureProvider, ViewImage
from .renderer import RenderOutput, canonical_view_poses, render
from .solver import RansacConfig, ransac_umeyama
from .tensorio import CombineWeights, FeatureMap, combine_features, pca_reduce_pair


@dataclass
class Observation:
    """One target RGB-D frame."""

    depth: np.ndarray
    mask: np.ndarray
    intrinsics: CameraIntrinsics
    frame_id: str = "frame"
    rgb: np.ndarray | None = None
    target_maps: list[FeatureMap] | None = None  # precomputed, else ask provider

    def validate(self) -> "Observation":
        if self.depth.shape != self.mask.shape:
            raise ValidationError("depth and mask dimensions differ")
        if self.depth.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValidationError("depth dimensions do not match intrinsics")
        return self


@dataclass(frozen=True)
class CoarseConfig:
    iters: int = 2                    # re-render/re-solve rounds after the first solve
    m: int = 50                       # correspondences kept per view
    pca_dims: int = 64
    weights: CombineWeights = field(default_factory=CombineWeights)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    mask_min_frac: float = 0.5        # patch footprint fraction required in-mask
    monotone_accept: bool = True      # keep an iteration only if confidence holds
    seed: int = 0

    def validate(self) -> "CoarseConfig":
        if self.iters < 0:
            raise ValidationError("iters must be >= 0")
        if self.m < 3:
            raise ValidationError("m must be at least 3")
        if self.pca_dims < 1:
            raise ValidationError("pca_dims must be positive")
        self.weights.validate()
        self.ransac.validate()
        return self


@dataclass(frozen=True)
class PoseEstimate:
    transform: SimilarityTransform   # model frame -> camera frame
    confidence: float                # mean cosine similarity of kept pairs
    view_index: int
    iterations_run: int
    inlier_count: int

    def to_json(self) -> dict:
        return {
            **self.transform.to_json(),
            "confidence": float(self.confidence),
            "view_index": int(self.view_index),
        }


@dataclass
class ViewDiagnostics:
    view_index: int
    ok: bool
    message: str = ""
    confidence: float = -1.0
    inlier_count: int = 0
    iterations_run: int = 0


def _derived_seed(base: int, *parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(base).encode())
    for p in parts:
        h.update(str(p).encode())
    return int.from_bytes(h.digest(), "little")


def _fuse(maps: list[FeatureMap], weights: CombineWeights) -> FeatureMap:
    weighted = [(fm, weights.weight_for(fm.source_tag)) for fm in maps]
    return combine_features(weighted)


def _target_features(obs: Observation, provider: FeatureProvider,
                     cfg: CoarseConfig) -> list[FeatureMap]:
    if obs.target_maps is not None:
        return obs.target_maps
    view = ViewImage(kind="target", depth=obs.depth, mask=obs.mask,
                     intrinsics=obs.intrinsics, rgb=obs.rgb, tag="target")
    return provider.features2d(view)


def match_and_solve(obs: Observation, mesh: TriangleMesh,
                    render_pose: SimilarityTransform, provider: FeatureProvider,
                    cfg: CoarseConfig, tag: str, ransac_seed: int
                    ) -> tuple[SimilarityTransform, CorrespondenceSet, int, RenderOutput]:
    """One render-match-lift-solve pass against the given render pose."""
    out = render(mesh, render_pose, obs.intrinsics, shade=True)
    if not out.mask.any():
        raise EmptyCloudError("reference render is empty (object behind camera?)")

    ref_view = ViewImage(kind="render", depth=out.depth, mask=out.mask,
                         intrinsics=obs.intrinsics, pose=render_pose,
                         rgb=out.shaded, tag=tag)
    ref_fused = _fuse(provider.features2d(ref_view), cfg.weights)
    tgt_fused = _fuse(_target_features(obs, provider, cfg), cfg.weights)
    if (ref_fused.grid_h, ref_fused.grid_w) != (tgt_fused.grid_h, tgt_fused.grid_w):
        raise ProviderError(
            f"provider emitted mismatched grids: reference "
            f"{ref_fused.grid_h}x{ref_fused.grid_w} vs target "
            f"{tgt_fused.grid_h}x{tgt_fused.grid_w}")
    if tgt_fused.channels > cfg.pca_dims:
        tgt_fused, ref_fused = pca_reduce_pair(tgt_fused, ref_fused, cfg.pca_dims)

    s = score_matrix(tgt_fused, ref_fused)
    d = cyclical_distances(s)
    valid = foreground_patches(obs.mask, tgt_fused, cfg.mask_min_frac)
    corr = select_correspondences(s, d, min(cfg.m, s.n_target), valid_target=valid)
    if len(corr) < cfg.ransac.sample_size:
        raise EmptyCloudError(f"only {len(corr)} correspondences after masking")

    tgt_px = np.array([patch_to_pixel(int(p), tgt_fused) for p in corr.p])
    ref_px = np.array([patch_to_pixel(int(q), ref_fused) for q in corr.q])
    tgt_lift = lift_pixels(obs.depth, obs.intrinsics, tgt_px)
    keep_t = np.zeros(len(corr), dtype=bool)
    keep_t[tgt_lift.kept] = True
    ref_lift = lift_pixels(out.depth, obs.intrinsics, ref_px)
    keep_r = np.zeros(len(corr), dtype=bool)
    keep_r[ref_lift.kept] = True
    keep = keep_t & keep_r
    if keep.sum() < cfg.ransac.sample_size:
        raise EmptyCloudError(f"only {int(keep.sum())} pairs with valid depth")
    # align the two lifted clouds back onto the surviving pair set
    tgt_pts = np.full((len(corr), 3), np.nan)
    tgt_pts[tgt_lift.kept] = tgt_lift.cloud.points
    ref_pts = np.full((len(corr), 3), np.nan)
    ref_pts[ref_lift.kept] = ref_lift.cloud.points

    fit = ransac_umeyama(ref_pts[keep], tgt_pts[keep],
                         replace(cfg.ransac, seed=ransac_seed))
    new_pose = fit.transform.compose(render_pose)
    kept_corr = CorrespondenceSet(p=corr.p[keep], q=corr.q[keep],
                                  sim=corr.sim[keep], cyc=corr.cyc[keep])
    return new_pose, kept_corr, fit.inlier_count, out


def run_single_view(obs: Observation, mesh: TriangleMesh,
                    view_pose: SimilarityTransform, provider: FeatureProvider,
                    cfg: CoarseConfig, view_index: int = 0
                    ) -> tuple[PoseEstimate, CorrespondenceSet]:
    """Full per-view estimation: initial solve plus cfg.iters refinement rounds."""
    obs.validate()
    cfg.validate()
    seed0 = _derived_seed(cfg.seed, "view", view_index, "it", 0)
    pose, corr, inliers, _ = match_and_solve(
        obs, mesh, view_pose, provider, cfg, tag=f"v{view_index}_it0",
        ransac_seed=seed0)
    conf = view_confidence(corr)
    iters_run = 0
    for it in range(1, cfg.iters + 1):
        seed_i = _derived_seed(cfg.seed, "view", view_index, "it", it)
        try:
            cand_pose, cand_corr, cand_inliers, _ = match_and_solve(
                obs, mesh, pose, provider, cfg, tag=f"v{view_index}_it{it}",
                ransac_seed=seed_i)
        except (EmptyCloudError, NoConsensusError):
            break
        cand_conf = view_confidence(cand_corr)
        iters_run = it
        if cand_conf >= conf or not cfg.monotone_accept:
            pose, corr, inliers, conf = cand_pose, cand_corr, cand_inliers, cand_conf
    est = PoseEstimate(transform=pose, confidence=conf, view_index=view_index,
                       iterations_run=iters_run, inlier_count=inliers)
    return est, corr


def coarse_estimate(obs: Observation, mesh: TriangleMesh,
                    provider: FeatureProvider, cfg: CoarseConfig = CoarseConfig()
                    ) -> tuple[PoseEstimate, list[ViewDiagnostics]]:
    """Estimate over all four canonical views and keep the most confident."""
    obs.validate()
    cfg.validate()
    views = canonical_view_poses(mesh.diameter(), obs.intrinsics)
    results: list[PoseEstimate] = []
    diags: list[ViewDiagnostics] = []
    for vi, view_pose in enumerate(views):
        try:
            est, _ = run_single_view(obs, mesh, view_pose, provider, cfg, view_index=vi)
            results.append(est)
            diags.append(ViewDiagnostics(vi, True, confidence=est.confidence,
                                         inlier_count=est.inlier_count,
                                         iterations_run=est.iterations_run))
        except (EmptyCloudError, NoConsensusError, ProviderError, ValidationError) as e:
            diags.append(ViewDiagnostics(vi, False, message=str(e)))
    if not results:
        raise EstimationFailedError(
            "every view failed: " + "; ".join(f"view {d.view_index}: {d.message}"
                                              for d in diags),
            diagnostics=diags)
    best = max(results, key=lambda r: (r.confidence, -r.view_index))
    assert all(best.confidence >= r.confidence for r in results)
    return best, diags
