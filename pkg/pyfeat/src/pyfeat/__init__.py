"""pyfeat: pre-trained 2D/3D feature extraction sidecar.

Wraps image encoders (DINO v1/v2, Stable Diffusion hooks) and a DGCNN point
encoder behind the UFTN file format and the line-JSON provider protocol the
pose estimation core consumes. A weight-free `patchstats` backend keeps the
whole path testable on machines without model checkpoints.
"""

__version__ = "0.1.0"

from .extract2d import (BACKENDS, REFERENCE_DIMS, ExtractorConfig,
                        extract_to_files, make_extractors)
from .uftn import read_tensor, write_feature_map, write_tensor

__all__ = [
    "BACKENDS", "REFERENCE_DIMS", "ExtractorConfig", "extract_to_files",
    "make_extractors", "read_tensor", "write_feature_map", "write_tensor",
]
