"""Software z-buffer rasterizer for reference meshes, plus canonical view poses.

Pixels are sampled at their centers (ix + 0.5, iy + 0.5). Coverage uses edge
functions with a fill rule that assigns shared edges to exactly one owner, so
output is deterministic and oracle-checkable. Depth interpolation is
perspective correct (linear in 1/z over the screen triangle). Faces are
rendered double-sided; faces with any vertex closer than NEAR_Z are discarded
rather than clipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, SimilarityTransform, TriangleMesh, rot_y

NEAR_Z = 1e-6


@dataclass(frozen=True)
class RenderOutput:
    depth: np.ndarray       # (H,W) float32 meters, 0 = background
    mask: np.ndarray        # (H,W) bool
    face_index: np.ndarray  # (H,W) int32, -1 = background
    shaded: np.ndarray | None = None  # (H,W,3) float32 in [0,1]

    def validate(self) -> "RenderOutput":
        ok = (self.mask == (self.face_index >= 0)).all() and (self.mask == (self.depth > 0)).all()
        if not ok:
            raise AssertionError("render buffers disagree about coverage")
        return self


def _edge_is_owner(ex: float, ey: float) -> bool:
    """Which of the two half-open sides owns points exactly on the edge."""
    return ey < 0 or (ey == 0 and ex > 0)


def render(mesh: TriangleMesh, pose: SimilarityTransform, k: CameraIntrinsics,
           shade: bool = True) -> RenderOutput:
    """Rasterize the mesh under pose (model frame -> camera frame)."""
    mesh.validate()
    k.validate()
    h, w = k.height, k.width
    depth = np.full((h, w), np.inf, dtype=np.float64)
    face_index = np.full((h, w), -1, dtype=np.int32)
    shaded = np.zeros((h, w, 3), dtype=np.float64) if shade else None

    cam = pose.apply(mesh.vertices)  # (V,3)
    uv = np.empty((mesh.n_vertices, 2), dtype=np.float64)
    zs = cam[:, 2]
    front = zs > NEAR_Z
    uv[front, 0] = k.fx * cam[front, 0] / zs[front] + k.cx
    uv[front, 1] = k.fy * cam[front, 1] / zs[front] + k.cy

    if shade:
        if mesh.colors is not None:
            vcol = np.clip(mesh.colors, 0.0, 1.0)
        else:
            vcol = np.full((mesh.n_vertices, 3), 0.7)

    for fi in range(mesh.n_faces):
        i0, i1, i2 = mesh.faces[fi]
        if not (front[i0] and front[i1] and front[i2]):
            continue
        a, b, c = uv[i0], uv[i1], uv[i2]
        area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if area2 == 0.0:
            continue
        if area2 < 0:  # orient so edge functions are positive inside
            i1, i2 = i2, i1
            b, c = c, b
            area2 = -area2

        x0 = max(0, int(np.ceil(min(a[0], b[0], c[0]) - 0.5)))
        x1 = min(w - 1, int(np.floor(max(a[0], b[0], c[0]) - 0.5)))
        y0 = max(0, int(np.ceil(min(a[1], b[1], c[1]) - 0.5)))
        y1 = min(h - 1, int(np.floor(max(a[1], b[1], c[1]) - 0.5)))
        if x1 < x0 or y1 < y0:
            continue

        px = np.arange(x0, x1 + 1, dtype=np.float64) + 0.5
        py = np.arange(y0, y1 + 1, dtype=np.float64) + 0.5
        pxg, pyg = np.meshgrid(px, py)

        # edge functions cross(edge, p - start): e0 opposite vertex a, etc.
        e0 = (c[0] - b[0]) * (pyg - b[1]) - (c[1] - b[1]) * (pxg - b[0])
        e1 = (a[0] - c[0]) * (pyg - c[1]) - (a[1] - c[1]) * (pxg - c[0])
        e2 = (b[0] - a[0]) * (pyg - a[1]) - (b[1] - a[1]) * (pxg - a[0])
        own0 = _edge_is_owner(c[0] - b[0], c[1] - b[1])
        own1 = _edge_is_owner(a[0] - c[0], a[1] - c[1])
        own2 = _edge_is_owner(b[0] - a[0], b[1] - a[1])
        inside = (((e0 > 0) | ((e0 == 0) & own0))
                  & ((e1 > 0) | ((e1 == 0) & own1))
                  & ((e2 > 0) | ((e2 == 0) & own2)))
        if not inside.any():
            continue

        l0 = e0 / area2
        l1 = e1 / area2
        l2 = e2 / area2
        invz = l0 / zs[i0] + l1 / zs[i1] + l2 / zs[i2]
        z = 1.0 / invz

        tile_d = depth[y0:y1 + 1, x0:x1 + 1]
        win = inside & (z < tile_d) & (z > NEAR_Z)
        if not win.any():
            continue
        tile_d[win] = z[win]
        face_index[y0:y1 + 1, x0:x1 + 1][win] = fi
        if shade:
            v0, v1, v2 = cam[i0], cam[i1], cam[i2]
            n = np.cross(v1 - v0, v2 - v0)
            nn = np.linalg.norm(n)
            intensity = 0.25 + 0.75 * abs(n[2] / nn) if nn > 0 else 0.25
            # perspective-correct vertex color interpolation
            cw0 = l0 / zs[i0]
            cw1 = l1 / zs[i1]
            cw2 = l2 / zs[i2]
            col = (cw0[..., None] * vcol[i0] + cw1[..., None] * vcol[i1]
                   + cw2[..., None] * vcol[i2]) * z[..., None]
            shaded[y0:y1 + 1, x0:x1 + 1][win] = np.clip(col[win] * intensity, 0.0, 1.0)

    mask = np.isfinite(depth) & (face_index >= 0)
    out_depth = np.where(mask, depth, 0.0).astype(np.float32)
    return RenderOutput(
        depth=out_depth,
        mask=mask,
        face_index=face_index,
        shaded=shaded.astype(np.float32) if shade else None,
    ).validate()


def fit_distance(mesh_diameter: float, k: CameraIntrinsics, fill: float = 0.6) -> float:
    """Distance along +z at which the projected diameter fills `fill` of the image."""
    if mesh_diameter <= 0:
        raise ValueError("mesh diameter must be positive")
    return max(k.fx * mesh_diameter / (fill * k.width),
               k.fy * mesh_diameter / (fill * k.height))


def canonical_view_poses(mesh_diameter: float, k: CameraIntrinsics,
                         fill: float = 0.6) -> list[SimilarityTransform]:
    """Four reference poses: 0/90/180/270 degrees about the canonical up axis,
    pushed along +z so the object spans roughly `fill` of the image."""
    dist = fit_distance(mesh_diameter, k, fill)
    t = np.array([0.0, 0.0, dist])
    return [SimilarityTransform(rot_y(angle), t, 1.0) for angle in (0.0, 90.0, 180.0, 270.0)]
