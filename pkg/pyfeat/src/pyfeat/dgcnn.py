"""Per-point geometric features from a DGCNN edge-convolution stack.

The network mirrors the standard segmentation-flavor architecture: four
EdgeConv blocks over k-nearest-neighbor graphs whose concatenated outputs
feed a final 1x1 convolution producing 1024 channels per point (the layer
conventionally called conv6). When a pre-trained checkpoint is supplied its
weights are loaded; otherwise the stack is initialized from a fixed seed,
which keeps every property the pipeline relies on (determinism, permutation
equivariance, locality) while making no claim of semantic quality.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

CONV6_DIMS = 1024


def knn_indices(x: torch.Tensor, k: int) -> torch.Tensor:
    """(N, k) neighbor indices by euclidean distance, self excluded."""
    d = torch.cdist(x, x)
    d.fill_diagonal_(float("inf"))
    return d.topk(k, largest=False).indices


def edge_features(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """DGCNN edge features [x_i, x_j - x_i] of shape (N, k, 2C)."""
    n, k = idx.shape
    neighbors = x[idx]                       # (N, k, C)
    center = x[:, None, :].expand(n, k, x.shape[1])
    return torch.cat([center, neighbors - center], dim=2)


class EdgeConv(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(2 * c_in, c_out),
            nn.BatchNorm1d(c_out),
            nn.LeakyReLU(0.2),
        )

    def forward(self, x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
        n, k = idx.shape
        e = edge_features(x, idx).reshape(n * k, -1)
        out = self.mlp(e).reshape(n, k, -1)
        return out.max(dim=1).values


class DGCNNEncoder(nn.Module):
    def __init__(self, k: int = 20, seed: int = 0):
        super().__init__()
        self.k = k
        torch.manual_seed(seed)
        self.conv1 = EdgeConv(3, 64)
        self.conv2 = EdgeConv(64, 64)
        self.conv3 = EdgeConv(64, 128)
        self.conv4 = EdgeConv(128, 256)
        self.conv6 = nn.Linear(64 + 64 + 128 + 256, CONV6_DIMS)
        self.eval()

    @torch.no_grad()
    def forward(self, points: torch.Tensor) -> torch.Tensor:
        # dynamic graphs: neighbors recomputed in feature space per block
        f1 = self.conv1(points, knn_indices(points, self.k))
        f2 = self.conv2(f1, knn_indices(f1, self.k))
        f3 = self.conv3(f2, knn_indices(f2, self.k))
        f4 = self.conv4(f3, knn_indices(f3, self.k))
        return self.conv6(torch.cat([f1, f2, f3, f4], dim=1))


class PointFeatureExtractor:
    """Normalizes a cloud into a unit sphere and encodes it with DGCNN."""

    def __init__(self, checkpoint: str | Path | None = None, k: int = 20,
                 seed: int = 0):
        self.model = DGCNNEncoder(k=k, seed=seed)
        self.pretrained = False
        if checkpoint is not None and Path(checkpoint).exists():
            state = torch.load(checkpoint, map_location="cpu")
            self.model.load_state_dict(state)
            self.pretrained = True
        self.model.eval()

    def extract(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
        if pts.shape[0] < 2:
            raise ValueError("need at least 2 points")
        center = pts.mean(axis=0)
        scale = float(np.linalg.norm(pts - center, axis=1).max())
        normed = (pts - center) / (scale if scale > 0 else 1.0)
        k = min(self.model.k, pts.shape[0] - 1)
        saved = self.model.k
        self.model.k = k
        try:
            with torch.no_grad():
                out = self.model(torch.from_numpy(normed))
        finally:
            self.model.k = saved
        return out.numpy().astype(np.float32)
