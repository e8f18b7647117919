"""Synthetic scene generation: primitive meshes, random poses, rendered
RGB-D observations with ground truth, and the matching provider config.

These scenes drive the end-to-end test harnesses: the observation is a real
render of the reference mesh (or a deformed variant) under a known pose, so
lifting its depth and solving against noiseless correspondences must
reproduce the recorded pose.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .geometry import (CameraIntrinsics, SimilarityTransform, TriangleMesh,
                       random_rotation, save_obj, write_depth, write_intrinsics,
                       write_mask)
from .imageio import write_png_rgb
from .providers import SyntheticProviderConfig
from .renderer import fit_distance, render


def _weld(vertices: np.ndarray, faces: np.ndarray, decimals: int = 9) -> TriangleMesh:
    key = np.round(vertices, decimals)
    uniq, inverse = np.unique(key, axis=0, return_index=False, return_inverse=True)
    new_faces = inverse[faces]
    ok = ((new_faces[:, 0] != new_faces[:, 1])
          & (new_faces[:, 1] != new_faces[:, 2])
          & (new_faces[:, 0] != new_faces[:, 2]))
    mesh = TriangleMesh(uniq, new_faces[ok].astype(np.int32))
    return mesh.drop_degenerate_faces()


def _grid_face(n: int):
    """Triangulated unit grid [(0..n) x (0..n)] as (verts2d, faces)."""
    lin = np.linspace(0.0, 1.0, n + 1)
    uu, vv = np.meshgrid(lin, lin)
    verts = np.stack([uu.ravel(), vv.ravel()], axis=1)
    faces = []
    for r in range(n):
        for c in range(n):
            i0 = r * (n + 1) + c
            i1 = i0 + 1
            i2 = i0 + (n + 1)
            i3 = i2 + 1
            faces.append([i0, i2, i1])
            faces.append([i1, i2, i3])
    return verts, np.array(faces)


def make_cube(subdiv: int = 3) -> TriangleMesh:
    """Axis-aligned cube of side 1 centered at the origin, welded."""
    grid, gfaces = _grid_face(subdiv)
    all_v = []
    all_f = []
    axes = [
        (0, 1, 2, +0.5), (0, 1, 2, -0.5),  # z faces
        (0, 2, 1, +0.5), (0, 2, 1, -0.5),  # y faces
        (2, 1, 0, +0.5), (2, 1, 0, -0.5),  # x faces
    ]
    for ax_u, ax_v, ax_n, offset in axes:
        base = len(all_v)
        for u, v in grid:
            p = np.zeros(3)
            p[ax_u] = u - 0.5
            p[ax_v] = v - 0.5
            p[ax_n] = offset
            all_v.append(p)
        for f in gfaces:
            all_f.append([base + f[0], base + f[1], base + f[2]])
    return _weld(np.array(all_v), np.array(all_f))


def make_sphere(rings: int = 10, segments: int = 16, radius: float = 0.5) -> TriangleMesh:
    verts = [np.array([0.0, radius, 0.0])]
    for r in range(1, rings):
        phi = np.pi * r / rings
        y = radius * np.cos(phi)
        rad = radius * np.sin(phi)
        for s in range(segments):
            th = 2 * np.pi * s / segments
            verts.append(np.array([rad * np.cos(th), y, rad * np.sin(th)]))
    verts.append(np.array([0.0, -radius, 0.0]))
    faces = []
    for s in range(segments):
        faces.append([0, 1 + s, 1 + (s + 1) % segments])
    for r in range(rings - 2):
        a = 1 + r * segments
        b = 1 + (r + 1) * segments
        for s in range(segments):
            s2 = (s + 1) % segments
            faces.append([a + s, b + s, a + s2])
            faces.append([a + s2, b + s, b + s2])
    last = len(verts) - 1
    base = 1 + (rings - 2) * segments
    for s in range(segments):
        faces.append([last, base + (s + 1) % segments, base + s])
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int32))


def make_ellipsoid(semi: tuple[float, float, float] = (0.5, 0.3, 0.2),
                   rings: int = 10, segments: int = 16) -> TriangleMesh:
    sph = make_sphere(rings, segments, radius=1.0)
    return TriangleMesh(sph.vertices * np.asarray(semi), sph.faces)


def make_house(subdiv: int = 2) -> TriangleMesh:
    """Cube with a triangular roof ridge: asymmetric under all 90-degree turns."""
    cube = make_cube(subdiv)
    v = cube.vertices.copy()
    ridge_a = np.array([[-0.5, 0.85, 0.0], [0.5, 0.85, 0.0]])
    base = len(v)
    v = np.vstack([v, ridge_a])
    top = np.isclose(cube.vertices[:, 1], 0.5)
    front = top & np.isclose(cube.vertices[:, 2], -0.5)
    back = top & np.isclose(cube.vertices[:, 2], 0.5)
    faces = [list(f) for f in cube.faces]
    front_ids = np.nonzero(front)[0]
    back_ids = np.nonzero(back)[0]
    front_ids = front_ids[np.argsort(v[front_ids, 0])]
    back_ids = back_ids[np.argsort(v[back_ids, 0])]
    for ids, apexes, flip in ((front_ids, (base, base + 1), False),
                              (back_ids, (base, base + 1), True)):
        for i in range(len(ids) - 1):
            a, b = int(ids[i]), int(ids[i + 1])
            apex = apexes[0] if v[a, 0] < 0 and v[b, 0] <= 0 else apexes[1]
            faces.append([a, apex, b] if flip else [a, b, apex])
    # roof slopes
    faces.append([base, base + 1, int(front_ids[-1])])
    faces.append([base, int(front_ids[0]), base + 1])
    return _weld(np.asarray(v), np.asarray(faces))


SHAPES = {
    "cube": make_cube,
    "sphere": make_sphere,
    "ellipsoid": make_ellipsoid,
    "house": make_house,
}


def make_shape(kind: str, colorize: bool = True, **kwargs) -> TriangleMesh:
    if kind not in SHAPES:
        raise ValidationError(f"unknown shape {kind!r}; choose from {sorted(SHAPES)}")
    mesh = SHAPES[kind](**kwargs).normalized_to_canonical()
    if colorize:
        lo, hi = mesh.bbox()
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        colors = 0.15 + 0.7 * (mesh.vertices - lo) / span
        mesh = TriangleMesh(mesh.vertices, mesh.faces, colors)
    return mesh


def random_pose(rng: np.random.Generator, k: CameraIntrinsics,
                mesh_diameter: float = 1.0,
                scale_range: tuple[float, float] = (0.15, 0.35),
                max_rot_deg: float | None = None) -> SimilarityTransform:
    """Random object pose that keeps the object inside the view frustum."""
    s = float(rng.uniform(*scale_range))
    if max_rot_deg is None:
        r = random_rotation(rng)
    else:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = np.deg2rad(rng.uniform(0, max_rot_deg))
        from .geometry import axis_angle_to_matrix

        r = axis_angle_to_matrix(axis * angle)
    base_z = fit_distance(mesh_diameter * s, k)
    z = base_z * rng.uniform(1.0, 1.25)
    # keep lateral offset small enough that the silhouette stays in frame
    margin = 0.25 * z / max(k.fx, k.fy) * min(k.width, k.height)
    t = np.array([rng.uniform(-margin, margin), rng.uniform(-margin, margin), z])
    return SimilarityTransform(r, t, s).validate()


@dataclass
class SynthSpec:
    shape: str = "house"
    width: int = 160
    height: int = 120
    fx: float = 180.0
    fy: float = 180.0
    seed: int = 0
    scale_range: tuple[float, float] = (0.15, 0.35)
    max_rot_deg: float | None = None
    depth_noise: float = 0.0
    provider: SyntheticProviderConfig = field(default_factory=SyntheticProviderConfig)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.width / 2.0,
                                self.height / 2.0, self.width, self.height).validate()


@dataclass
class SynthScene:
    mesh: TriangleMesh
    gt_pose: SimilarityTransform
    depth: np.ndarray
    mask: np.ndarray
    rgb: np.ndarray
    intrinsics: CameraIntrinsics
    provider_cfg: SyntheticProviderConfig
    spec: SynthSpec


def build_scene(spec: SynthSpec, observed_mesh: TriangleMesh | None = None) -> SynthScene:
    """Render one observation. `observed_mesh` lets the target object differ
    from the reference mesh (shape-gap experiments)."""
    k = spec.intrinsics()
    rng = np.random.default_rng(spec.seed)
    mesh = make_shape(spec.shape)
    target_mesh = observed_mesh if observed_mesh is not None else mesh
    gt = random_pose(rng, k, target_mesh.diameter(), spec.scale_range,
                     spec.max_rot_deg)
    out = render(target_mesh, gt, k, shade=True)
    if not out.mask.any():
        raise ValidationError("synthetic pose rendered an empty observation")
    depth = out.depth.astype(np.float32)
    if spec.depth_noise > 0:
        noise = rng.normal(scale=spec.depth_noise, size=depth.shape).astype(np.float32)
        depth = np.where(out.mask, np.maximum(depth + noise, 1e-4), depth)
    return SynthScene(mesh=mesh, gt_pose=gt, depth=depth, mask=out.mask,
                      rgb=out.shaded, intrinsics=k, provider_cfg=spec.provider,
                      spec=spec)


def write_scene(scene: SynthScene, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_intrinsics(scene.intrinsics, out / "intrinsics.json")
    write_depth(scene.depth, out / "depth.uftn")
    write_mask(scene.mask, out / "mask.png")
    write_png_rgb(scene.rgb, out / "rgb.png")
    save_obj(scene.mesh, out / "mesh.obj")
    (out / "gt_pose.json").write_text(
        json.dumps(scene.gt_pose.to_json(), sort_keys=True) + "\n")
    synth_meta = {
        "provider": scene.provider_cfg.to_json(),
        "shape": scene.spec.shape,
        "seed": scene.spec.seed,
        "depth_noise": scene.spec.depth_noise,
    }
    (out / "synth.json").write_text(json.dumps(synth_meta, sort_keys=True) + "\n")
    return out
