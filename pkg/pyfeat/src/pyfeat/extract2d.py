"""2D patch-feature extractors behind one interface.

Real backends (DINOv1 descriptor bins, DINOv2, Stable Diffusion hooks) load
pre-trained checkpoints and only report themselves available when their
weights can actually be found, so the sidecar degrades gracefully on
machines without model caches. The `patchstats` backend computes
deterministic hand-crafted patch features with no weights at all and is
always available; it exercises the full file/protocol path and serves as a
drop-in for integration tests.

All backends resample their native grids to a common patch grid (the
DINOv2-style image_size // patch_size layout) so downstream fusion sees
matching shapes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

# channel widths when the reference checkpoints are loaded
REFERENCE_DIMS = {"dinov1": 6528, "dinov2": 384, "sd": 10560}


@dataclass
class ExtractorConfig:
    models: list = field(default_factory=lambda: ["patchstats"])
    patch_size: int = 14
    image_size: int = 448          # inputs are resized to this square
    device: str = "cpu"
    sd_timestep: int = 261         # diffusion step for feature hooks
    sd_layers: tuple = (2, 5, 8)   # unet up-block hook points
    dino_layer: int = 9            # descriptor layer for the v1 bins
    stub_channels: int = 24        # patchstats output width
    checkpoint_dir: str | None = None

    def grid_for(self, w: int, h: int) -> tuple[int, int]:
        return self.image_size // self.patch_size, self.image_size // self.patch_size


def load_image_rgb(path: str | Path, size: int) -> np.ndarray:
    """Image as (size, size, 3) float32 in [0,1]; grayscale is promoted."""
    img = Image.open(path).convert("RGB").resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


class Extractor:
    name = "base"

    def __init__(self, cfg: ExtractorConfig):
        self.cfg = cfg

    def available(self) -> bool:
        raise NotImplementedError

    def channels(self) -> int:
        raise NotImplementedError

    def extract(self, image: np.ndarray) -> np.ndarray:
        """(grid, grid, channels) float32 from a (S,S,3) float image."""
        raise NotImplementedError


class PatchStatsExtractor(Extractor):
    """Weight-free deterministic features: per-patch color statistics,
    gradient orientation histograms, and a fixed sinusoidal position code."""

    name = "patchstats"

    def available(self) -> bool:
        return True

    def channels(self) -> int:
        return self.cfg.stub_channels

    def extract(self, image: np.ndarray) -> np.ndarray:
        g = self.cfg.image_size // self.cfg.patch_size
        p = self.cfg.patch_size
        img = image[: g * p, : g * p]
        gray = img.mean(axis=2)
        gy, gx = np.gradient(gray)
        mag = np.hypot(gx, gy)
        ang = np.arctan2(gy, gx)

        def pool(a):
            return a[: g * p, : g * p].reshape(g, p, g, p).mean(axis=(1, 3))

        feats = [pool(img[..., c]) for c in range(3)]
        feats += [pool(img[..., c] ** 2) for c in range(3)]
        feats.append(pool(mag))
        for k in range(8):  # orientation histogram bins
            lo = -np.pi + k * (2 * np.pi / 8)
            hi = lo + 2 * np.pi / 8
            feats.append(pool(np.where((ang >= lo) & (ang < hi), mag, 0.0)))
        yy, xx = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
        for freq in (1.0, 2.0):
            feats.append(np.sin(freq * np.pi * xx / g))
            feats.append(np.cos(freq * np.pi * xx / g))
            feats.append(np.sin(freq * np.pi * yy / g))
            feats.append(np.cos(freq * np.pi * yy / g))
        out = np.stack(feats, axis=-1).astype(np.float32)
        want = self.cfg.stub_channels
        if out.shape[-1] < want:
            pad = np.zeros((g, g, want - out.shape[-1]), dtype=np.float32)
            out = np.concatenate([out, pad], axis=-1)
        return out[..., :want]


def _find_checkpoint(cfg: ExtractorConfig, names: list[str]) -> Path | None:
    roots = []
    if cfg.checkpoint_dir:
        roots.append(Path(cfg.checkpoint_dir))
    if os.environ.get("PYFEAT_CHECKPOINTS"):
        roots.append(Path(os.environ["PYFEAT_CHECKPOINTS"]))
    for root in roots:
        for name in names:
            p = root / name
            if p.exists():
                return p
    return None


class Dinov2Extractor(Extractor):
    """ViT-S/14 patch tokens from a locally cached torchscript/state-dict."""

    name = "dinov2"

    def __init__(self, cfg: ExtractorConfig):
        super().__init__(cfg)
        self._model = None
        self._path = _find_checkpoint(cfg, ["dinov2_vits14.pt", "dinov2_vits14.pth"])

    def available(self) -> bool:
        return self._path is not None

    def channels(self) -> int:
        return REFERENCE_DIMS["dinov2"]

    def _load(self):
        import torch

        if self._model is None:
            self._model = torch.jit.load(str(self._path), map_location=self.cfg.device)
            self._model.eval()
        return self._model

    def extract(self, image: np.ndarray) -> np.ndarray:
        import torch

        model = self._load()
        g = self.cfg.image_size // self.cfg.patch_size
        mean = np.array([0.485, 0.456, 0.406], dtype=np.float32)
        std = np.array([0.229, 0.224, 0.225], dtype=np.float32)
        x = torch.from_numpy(((image - mean) / std).transpose(2, 0, 1)[None])
        with torch.no_grad():
            out = model(x)
        tokens = out[0] if isinstance(out, (tuple, list)) else out
        tokens = tokens.squeeze(0)
        if tokens.shape[0] == g * g + 1:  # drop the class token
            tokens = tokens[1:]
        return tokens.reshape(g, g, -1).float().numpy()


class Dinov1Extractor(Extractor):
    """ViT-S/8 binned descriptors (17 spatial bins x 384 = 6528 channels)."""

    name = "dinov1"

    def __init__(self, cfg: ExtractorConfig):
        super().__init__(cfg)
        self._path = _find_checkpoint(cfg, ["dino_vits8.pt", "dino_deitsmall8.pth"])
        self._model = None

    def available(self) -> bool:
        return self._path is not None

    def channels(self) -> int:
        return REFERENCE_DIMS["dinov1"]

    def extract(self, image: np.ndarray) -> np.ndarray:
        import torch

        if self._model is None:
            self._model = torch.jit.load(str(self._path), map_location=self.cfg.device)
            self._model.eval()
        g = self.cfg.image_size // self.cfg.patch_size
        mean = np.array([0.485, 0.456, 0.406], dtype=np.float32)
        std = np.array([0.229, 0.224, 0.225], dtype=np.float32)
        x = torch.from_numpy(((image - mean) / std).transpose(2, 0, 1)[None])
        with torch.no_grad():
            tokens = self._model(x).squeeze(0)
        if tokens.shape[0] != g * g:
            tokens = tokens[1:]
        grid = tokens.reshape(g, g, -1).float().numpy()
        return _log_bin(grid)


def _log_bin(grid: np.ndarray, hierarchy: int = 2) -> np.ndarray:
    """Spatial log-binning: concatenate each cell with ring-averaged context
    at two scales (17 bins total for hierarchy 2)."""
    g, _, c = grid.shape
    padded = np.pad(grid, ((2, 2), (2, 2), (0, 0)), mode="edge")
    parts = [grid]
    offsets1 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    for dy, dx in offsets1:
        parts.append(padded[2 + dy:2 + dy + g, 2 + dx:2 + dx + g])
    for dy, dx in offsets1:
        parts.append(padded[2 + 2 * dy:2 + 2 * dy + g, 2 + 2 * dx:2 + 2 * dx + g])
    return np.concatenate(parts, axis=-1)


class StableDiffusionExtractor(Extractor):
    """U-Net up-block activations hooked at one diffusion timestep."""

    name = "sd"

    def __init__(self, cfg: ExtractorConfig):
        super().__init__(cfg)
        self._path = _find_checkpoint(cfg, ["sd_v15_unet.pt"])
        self._model = None

    def available(self) -> bool:
        return self._path is not None

    def channels(self) -> int:
        return REFERENCE_DIMS["sd"]

    def extract(self, image: np.ndarray) -> np.ndarray:
        import torch

        if self._model is None:
            self._model = torch.jit.load(str(self._path), map_location=self.cfg.device)
            self._model.eval()
        g = self.cfg.image_size // self.cfg.patch_size
        x = torch.from_numpy((image * 2.0 - 1.0).transpose(2, 0, 1)[None])
        with torch.no_grad():
            feats = self._model(x, torch.tensor([self.cfg.sd_timestep]))
        maps = feats if isinstance(feats, (tuple, list)) else [feats]
        resampled = []
        for fm in maps:
            fm = torch.nn.functional.interpolate(fm.float(), size=(g, g),
                                                 mode="bilinear",
                                                 align_corners=False)
            resampled.append(fm.squeeze(0).permute(1, 2, 0).numpy())
        return np.concatenate(resampled, axis=-1)


BACKENDS = {
    "patchstats": PatchStatsExtractor,
    "dinov1": Dinov1Extractor,
    "dinov2": Dinov2Extractor,
    "sd": StableDiffusionExtractor,
}


def make_extractors(cfg: ExtractorConfig) -> list[Extractor]:
    out = []
    for name in cfg.models:
        if name not in BACKENDS:
            raise ValueError(f"unknown extractor {name!r}; options {sorted(BACKENDS)}")
        out.append(BACKENDS[name](cfg))
    return out


def extract_to_files(image_path: str | Path, out_stem: str | Path,
                     cfg: ExtractorConfig) -> list[Path]:
    """Run every configured backend on one image; one UFTN file per model."""
    from .uftn import write_feature_map

    image = load_image_rgb(image_path, cfg.image_size)
    written = []
    for ext in make_extractors(cfg):
        if not ext.available():
            raise RuntimeError(
                f"backend {ext.name!r} has no checkpoint available; "
                f"set --checkpoint-dir or PYFEAT_CHECKPOINTS, or use patchstats")
        values = ext.extract(image).astype(np.float32)
        path = Path(f"{out_stem}.{ext.name}.uftn")
        write_feature_map(values, path, patch_size_px=cfg.patch_size,
                          image_w_px=cfg.image_size, image_h_px=cfg.image_size,
                          source_tag=ext.name)
        written.append(path)
    return written
