"""Provider-protocol server: line-delimited JSON over stdin/stdout.

Requests:
  {"id": n, "op": "features2d", "image": "<path.png>", "out": "<path.uftn>"}
  {"id": n, "op": "features3d", "cloud": "<path.uftn>", "out": "<path.uftn>"}
Responses:
  {"id": n, "ok": true} | {"id": n, "ok": false, "error": "..."}

One request is outstanding at a time; every error is reported in-band so the
process only exits when stdin closes.
"""

from __future__ import annotations

import json
import sys

import numpy as np

from .extract2d import ExtractorConfig, load_image_rgb, make_extractors
from .uftn import read_tensor, write_feature_map, write_tensor


class ProtocolServer:
    def __init__(self, cfg: ExtractorConfig, dgcnn_checkpoint=None,
                 dgcnn_seed: int = 0):
        self.cfg = cfg
        self.extractors = make_extractors(cfg)
        for ext in self.extractors:
            if not ext.available():
                raise RuntimeError(f"backend {ext.name!r} unavailable; "
                                   f"cannot serve with missing checkpoints")
        self._point_extractor = None
        self._dgcnn_checkpoint = dgcnn_checkpoint
        self._dgcnn_seed = dgcnn_seed

    def _points(self):
        if self._point_extractor is None:
            from .dgcnn import PointFeatureExtractor

            self._point_extractor = PointFeatureExtractor(
                self._dgcnn_checkpoint, seed=self._dgcnn_seed)
        return self._point_extractor

    def handle(self, request: dict) -> dict:
        rid = request.get("id")
        try:
            op = request.get("op")
            if op == "features2d":
                self._features2d(request["image"], request["out"])
            elif op == "features3d":
                self._features3d(request["cloud"], request["out"])
            else:
                return {"id": rid, "ok": False, "error": f"unknown op {op!r}"}
            return {"id": rid, "ok": True}
        except KeyError as e:
            return {"id": rid, "ok": False, "error": f"missing field {e}"}
        except Exception as e:  # report in-band, keep serving
            return {"id": rid, "ok": False, "error": f"{type(e).__name__}: {e}"}

    def _features2d(self, image_path: str, out_path: str) -> None:
        image = load_image_rgb(image_path, self.cfg.image_size)
        # the protocol carries one output file per request: normalize each
        # backend's patch vectors, scale by the configured proportions, and
        # concatenate so the core receives one fused map
        parts = []
        tags = []
        for ext in self.extractors:
            values = ext.extract(image).astype(np.float64)
            flat = values.reshape(-1, values.shape[-1])
            norms = np.linalg.norm(flat, axis=1, keepdims=True)
            flat = np.where(norms > 0, flat / np.where(norms > 0, norms, 1.0), 0.0)
            parts.append(flat)
            tags.append(ext.name)
        g = self.cfg.image_size // self.cfg.patch_size
        fused = np.concatenate(parts, axis=1).reshape(g, g, -1).astype(np.float32)
        write_feature_map(fused, out_path, patch_size_px=self.cfg.patch_size,
                          image_w_px=self.cfg.image_size,
                          image_h_px=self.cfg.image_size,
                          source_tag="+".join(tags))

    def _features3d(self, cloud_path: str, out_path: str) -> None:
        points = read_tensor(cloud_path)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"cloud tensor must be (N,3), got {points.shape}")
        feats = self._points().extract(points)
        write_tensor(feats, out_path)

    def run(self, stdin=None, stdout=None) -> int:
        stdin = stdin or sys.stdin
        stdout = stdout or sys.stdout
        for line in stdin:
            line = line.strip()
            if not line:
                continue
            try:
                request = json.loads(line)
            except json.JSONDecodeError as e:
                print(json.dumps({"id": None, "ok": False,
                                  "error": f"bad JSON: {e}"}),
                      file=stdout, flush=True)
                continue
            print(json.dumps(self.handle(request)), file=stdout, flush=True)
        return 0
