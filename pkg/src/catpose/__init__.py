"""catpose: zero-shot category-level 6-DOF object pose estimation.

The geometric and optimization core is fully self-contained; pre-trained
feature models plug in through the provider contract in `providers`.
"""

__version__ = "0.1.0"

from .coarse import (CoarseConfig, Observation, PoseEstimate, coarse_estimate,
                     run_single_view)
from .geometry import (CameraIntrinsics, PointCloud, SimilarityTransform,
                       TriangleMesh, lift_pixels, load_obj, mask_to_cloud,
                       patch_to_pixel, rotation_geodesic_deg, save_obj)
from .matching import (CorrespondenceSet, ScoreMatrix, cyclical_distances,
                       score_matrix, select_correspondences, view_confidence)
from .metrics import OrientedBox, SymmetrySpec, accuracy_table, iou3d, pose_error
from .providers import (FeatureProvider, FilesFeatureProvider,
                        SubprocessFeatureProvider, SyntheticFeatureProvider,
                        ViewImage)
from .refine import (LossWeights, RefineParams, adam_optimize,
                     build_refine_scene, chamfer_loss, mask_loss, total_loss)
from .renderer import RenderOutput, canonical_view_poses, render
from .solver import RansacConfig, RobustFitResult, ransac_umeyama, umeyama
from .tensorio import (CombineWeights, FeatureMap, combine_features,
                       pca_reduce_pair, read_feature_map, read_tensor,
                       write_feature_map, write_tensor)

__all__ = [
    "CameraIntrinsics", "CoarseConfig", "CombineWeights", "CorrespondenceSet",
    "FeatureMap", "FeatureProvider", "FilesFeatureProvider", "LossWeights",
    "Observation", "OrientedBox", "PointCloud", "PoseEstimate", "RansacConfig",
    "RefineParams", "RenderOutput", "RobustFitResult", "ScoreMatrix",
    "SimilarityTransform", "SubprocessFeatureProvider", "SymmetrySpec",
    "SyntheticFeatureProvider", "TriangleMesh", "ViewImage", "accuracy_table",
    "adam_optimize", "build_refine_scene", "canonical_view_poses",
    "chamfer_loss", "coarse_estimate", "combine_features", "cyclical_distances",
    "iou3d", "lift_pixels", "load_obj", "mask_loss", "mask_to_cloud",
    "patch_to_pixel", "pca_reduce_pair", "pose_error", "ransac_umeyama",
    "read_feature_map", "read_tensor", "render", "rotation_geodesic_deg",
    "run_single_view", "save_obj", "score_matrix", "select_correspondences",
    "total_loss", "umeyama", "view_confidence", "write_feature_map",
    "write_tensor",
]
