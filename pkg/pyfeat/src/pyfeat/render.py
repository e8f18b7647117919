"""Textured reference-view rendering for real feature extraction.

A compact z-buffer rasterizer with UV texture sampling: enough to turn a
textured OBJ (or a vertex-colored one) into the four canonical RGB views the
image extractors consume. Geometry conventions match the pose core: +z into
the scene, pixel centers at half-integer coordinates, canonical frame with a
unit bounding-box diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass
class TexturedMesh:
    vertices: np.ndarray            # (V,3)
    faces: np.ndarray               # (F,3) vertex ids
    uvs: np.ndarray | None          # (T,2)
    face_uvs: np.ndarray | None     # (F,3) uv ids
    colors: np.ndarray | None       # (V,3)
    texture: np.ndarray | None      # (H,W,3) float [0,1]

    def normalized(self) -> "TexturedMesh":
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        center = (lo + hi) / 2
        diag = float(np.linalg.norm(hi - lo))
        v = (self.vertices - center) / diag
        return TexturedMesh(v, self.faces, self.uvs, self.face_uvs,
                            self.colors, self.texture)


def load_textured_obj(path: str | Path) -> TexturedMesh:
    path = Path(path)
    verts, uvs, colors = [], [], []
    faces, face_uvs = [], []
    texture = None
    mtl_map = {}
    for raw in path.read_text().splitlines():
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "v":
            nums = [float(x) for x in parts[1:]]
            verts.append(nums[:3])
            colors.append(nums[3:6] if len(nums) >= 6 else [0.7, 0.7, 0.7])
        elif parts[0] == "vt":
            uvs.append([float(parts[1]), float(parts[2])])
        elif parts[0] == "f":
            vi, ti = [], []
            for tok in parts[1:]:
                fields = tok.split("/")
                vi.append(int(fields[0]) - 1)
                ti.append(int(fields[1]) - 1 if len(fields) > 1 and fields[1] else -1)
            for k in range(1, len(vi) - 1):
                faces.append([vi[0], vi[k], vi[k + 1]])
                face_uvs.append([ti[0], ti[k], ti[k + 1]])
        elif parts[0] == "mtllib":
            mtl_path = path.parent / parts[1]
            if mtl_path.exists():
                for line in mtl_path.read_text().splitlines():
                    toks = line.split()
                    if len(toks) >= 2 and toks[0] == "map_Kd":
                        tex_path = path.parent / toks[-1]
                        if tex_path.exists():
                            img = Image.open(tex_path).convert("RGB")
                            texture = np.asarray(img, dtype=np.float32) / 255.0
    has_uv = uvs and all(t >= 0 for f in face_uvs for t in f)
    return TexturedMesh(
        vertices=np.array(verts, dtype=np.float64),
        faces=np.array(faces, dtype=np.int64),
        uvs=np.array(uvs, dtype=np.float64) if has_uv else None,
        face_uvs=np.array(face_uvs, dtype=np.int64) if has_uv else None,
        colors=np.array(colors, dtype=np.float64) if colors else None,
        texture=texture,
    )


def _sample_texture(texture: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w, _ = texture.shape
    x = np.clip((u % 1.0) * (w - 1), 0, w - 1).astype(int)
    y = np.clip(((1.0 - v) % 1.0) * (h - 1), 0, h - 1).astype(int)
    return texture[y, x]


def render_view(mesh: TexturedMesh, rotation: np.ndarray, translation: np.ndarray,
                fx: float, fy: float, cx: float, cy: float,
                width: int, height: int) -> dict:
    """Rasterize one view; returns {'rgb', 'depth', 'mask'} arrays."""
    cam = mesh.vertices @ rotation.T + translation
    depth = np.full((height, width), np.inf)
    rgb = np.zeros((height, width, 3), dtype=np.float64)
    zs = cam[:, 2]
    ok = zs > 1e-6
    uv = np.zeros((cam.shape[0], 2))
    uv[ok, 0] = fx * cam[ok, 0] / zs[ok] + cx
    uv[ok, 1] = fy * cam[ok, 1] / zs[ok] + cy

    for fi in range(mesh.faces.shape[0]):
        i0, i1, i2 = mesh.faces[fi]
        if not (ok[i0] and ok[i1] and ok[i2]):
            continue
        corners = [i0, i1, i2]
        a, b, c = uv[i0], uv[i1], uv[i2]
        area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if area2 == 0.0:
            continue
        if area2 < 0:
            corners = [i0, i2, i1]
            a, b, c = uv[corners[0]], uv[corners[1]], uv[corners[2]]
            area2 = -area2
        x0 = max(0, int(np.ceil(min(a[0], b[0], c[0]) - 0.5)))
        x1 = min(width - 1, int(np.floor(max(a[0], b[0], c[0]) - 0.5)))
        y0 = max(0, int(np.ceil(min(a[1], b[1], c[1]) - 0.5)))
        y1 = min(height - 1, int(np.floor(max(a[1], b[1], c[1]) - 0.5)))
        if x1 < x0 or y1 < y0:
            continue
        px, py = np.meshgrid(np.arange(x0, x1 + 1) + 0.5,
                             np.arange(y0, y1 + 1) + 0.5)
        e0 = (c[0] - b[0]) * (py - b[1]) - (c[1] - b[1]) * (px - b[0])
        e1 = (a[0] - c[0]) * (py - c[1]) - (a[1] - c[1]) * (px - c[0])
        e2 = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
        inside = (e0 >= 0) & (e1 >= 0) & (e2 >= 0)
        if not inside.any():
            continue
        l0, l1, l2 = e0 / area2, e1 / area2, e2 / area2
        z0, z1b, z2 = zs[corners[0]], zs[corners[1]], zs[corners[2]]
        invz = l0 / z0 + l1 / z1b + l2 / z2
        z = 1.0 / invz
        tile = depth[y0:y1 + 1, x0:x1 + 1]
        win = inside & (z < tile) & (z > 1e-6)
        if not win.any():
            continue
        tile[win] = z[win]
        # perspective-correct attribute weights
        w0 = (l0 / z0) * z
        w1 = (l1 / z1b) * z
        w2 = (l2 / z2) * z
        if mesh.texture is not None and mesh.face_uvs is not None:
            t0, t1, t2 = mesh.face_uvs[fi]
            us = (w0 * mesh.uvs[t0, 0] + w1 * mesh.uvs[t1, 0] + w2 * mesh.uvs[t2, 0])
            vs = (w0 * mesh.uvs[t0, 1] + w1 * mesh.uvs[t1, 1] + w2 * mesh.uvs[t2, 1])
            col = _sample_texture(mesh.texture, us[win], vs[win])
        elif mesh.colors is not None:
            c0, c1c, c2 = (mesh.colors[corners[0]], mesh.colors[corners[1]],
                           mesh.colors[corners[2]])
            col = (w0[win, None] * c0 + w1[win, None] * c1c + w2[win, None] * c2)
        else:
            col = np.full((int(win.sum()), 3), 0.7)
        v0, v1v, v2 = cam[corners[0]], cam[corners[1]], cam[corners[2]]
        n = np.cross(v1v - v0, v2 - v0)
        nn = np.linalg.norm(n)
        shade = 0.25 + 0.75 * abs(n[2] / nn) if nn > 0 else 0.25
        rgb[y0:y1 + 1, x0:x1 + 1][win] = np.clip(col * shade, 0, 1)

    mask = np.isfinite(depth)
    return {"rgb": rgb.astype(np.float32),
            "depth": np.where(mask, depth, 0.0).astype(np.float32),
            "mask": mask}


def rot_y_deg(angle: float) -> np.ndarray:
    a = np.deg2rad(angle)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def canonical_views(mesh: TexturedMesh, fx: float, fy: float, cx: float,
                    cy: float, width: int, height: int,
                    fill: float = 0.6) -> list[dict]:
    """Front, back, and two side views of the canonical-frame mesh."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    diameter = float(np.linalg.norm(hi - lo))
    dist = max(fx * diameter / (fill * width), fy * diameter / (fill * height))
    t = np.array([0.0, 0.0, dist])
    return [render_view(mesh, rot_y_deg(a), t, fx, fy, cx, cy, width, height)
            for a in (0.0, 90.0, 180.0, 270.0)]
