"""Dense pose and shape refinement with analytic gradients.

Starting from a coarse similarity pose, this module optimizes a small
parameter block with Adam:

  - delta_rot: axis-angle rotation increment applied on the left of the
    initial (scale-absorbed) rotation,
  - delta_t: translation increment,
  - delta_log_s: per-axis log scale applied in the model frame,
  - delta_v: per-vertex displacement of the reference mesh.

Deformed model vertices are exp(delta_log_s) * (V + delta_v); camera-frame
points are delta_R @ (s_init R_init) v + (T_init + delta_t). The objective
combines a silhouette term (signed-distance surrogate plus a coverage term,
in pixel units), a symmetric Chamfer term, a feature-paired alignment term,
and regularizers anchoring pose, centroid, deformation, and mesh smoothness.
Every term returns its gradient; no autodiff framework is involved.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import EmptyCloudError, OptimizationAbort, ValidationError
from .geometry import (CameraIntrinsics, SimilarityTransform, TriangleMesh,
                       axis_angle_to_matrix, orthonormalize, skew)
from .tensorio import normalize_rows

# ---------------------------------------------------------------------------
# parameters and weights


@dataclass
class RefineParams:
    delta_rot: np.ndarray    # (3,) axis-angle, radians
    delta_t: np.ndarray      # (3,) meters
    delta_log_s: np.ndarray  # (3,) per-axis log scale
    delta_v: np.ndarray      # (V,3) canonical units

    @staticmethod
    def zeros(n_vertices: int) -> "RefineParams":
        return RefineParams(np.zeros(3), np.zeros(3), np.zeros(3),
                            np.zeros((n_vertices, 3)))

    def copy(self) -> "RefineParams":
        return RefineParams(self.delta_rot.copy(), self.delta_t.copy(),
                            self.delta_log_s.copy(), self.delta_v.copy())

    def wrap_rotation(self) -> None:
        """Keep ||delta_rot|| < pi by folding onto the equivalent short rotation."""
        theta = float(np.linalg.norm(self.delta_rot))
        if theta >= np.pi:
            self.delta_rot = self.delta_rot * ((theta - 2.0 * np.pi) / theta)

    def validate(self) -> "RefineParams":
        for arr in (self.delta_rot, self.delta_t, self.delta_log_s, self.delta_v):
            if not np.all(np.isfinite(arr)):
                raise ValidationError("refine parameters contain non-finite values")
        return self


@dataclass(frozen=True)
class LossWeights:
    a_m: float = 1.0       # silhouette
    a_c: float = 0.1       # chamfer
    a_g: float = 1.0       # feature alignment
    a_p: float = 20.0      # pose anchor
    a_ce: float = 1.0      # centroid anchor
    a_d: float = 1.0       # deformation magnitude
    w_edge: float = 1.0
    w_normal: float = 0.01
    w_laplacian: float = 0.1
    beta_g: float = 0.8    # feature-pair admission threshold

    def validate(self) -> "LossWeights":
        vals = (self.a_m, self.a_c, self.a_g, self.a_p, self.a_ce, self.a_d,
                self.w_edge, self.w_normal, self.w_laplacian)
        if any(v < 0 for v in vals):
            raise ValidationError("loss weights must be non-negative")
        return self


# ---------------------------------------------------------------------------
# pose chain: parameters -> camera-frame points, with backprop


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3): d(exp(w^) y)/dw = -[exp(w^) y]x @ J_l(w)."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    k = skew(w)
    if theta < 1e-7:
        return np.eye(3) + 0.5 * k + (1.0 / 6.0) * (k @ k)
    t2 = theta * theta
    return (np.eye(3) + ((1.0 - np.cos(theta)) / t2) * k
            + ((theta - np.sin(theta)) / (t2 * theta)) * (k @ k))


class PoseChain:
    """Forward state of the parameter-to-camera-points map plus backprop."""

    def __init__(self, init: SimilarityTransform, params: RefineParams,
                 vertices: np.ndarray, faces: np.ndarray,
                 sample_faces: np.ndarray | None = None,
                 sample_bary: np.ndarray | None = None):
        self.init = init
        self.params = params
        self.vertices_model = np.asarray(vertices, dtype=np.float64)
        self.sample_faces = sample_faces
        self.sample_bary = sample_bary
        self.delta_r = axis_angle_to_matrix(params.delta_rot)
        self.rot = orthonormalize(self.delta_r @ init.r)       # pure rotation
        self.linear = init.s * (self.delta_r @ init.r)         # includes scale
        self.t_bar = init.t + params.delta_t
        self.scale_axis = np.exp(params.delta_log_s)
        self.v_bar = self.scale_axis * (self.vertices_model + params.delta_v)
        self.x_verts = self.v_bar @ self.linear.T + self.t_bar
        if sample_faces is not None:
            self._corner_ids = np.asarray(faces)[sample_faces]  # (S,3)
            tri = self.v_bar[self._corner_ids]                  # (S,3,3)
            self.samples_model = np.einsum("sc,scj->sj", sample_bary, tri)
            self.x_samples = self.samples_model @ self.linear.T + self.t_bar
        else:
            self._corner_ids = None
            self.samples_model = None
            self.x_samples = None

    def pose(self) -> SimilarityTransform:
        """Refined similarity transform (isotropic part only; per-axis scale
        and deformation live in the deformed model vertices)."""
        return SimilarityTransform(self.rot, self.t_bar, self.init.s).validate()

    def backward(self, g_samples: np.ndarray | None = None,
                 g_verts: np.ndarray | None = None,
                 g_vbar: np.ndarray | None = None) -> RefineParams:
        """Pull camera/model-space gradients back onto the parameter block.

        Sample gradients are first scattered to vertices through the fixed
        barycentric weights; rotation/translation/scale pullbacks are then
        linear in the accumulated per-vertex gradients.
        """
        nv = self.vertices_model.shape[0]
        g_vertex_cam = np.zeros((nv, 3))
        if g_verts is not None:
            g_vertex_cam += g_verts
        if g_samples is not None:
            for c in range(3):
                np.add.at(g_vertex_cam, self._corner_ids[:, c],
                          self.sample_bary[:, c, None] * g_samples)
        g_t = g_vertex_cam.sum(axis=0)
        rotated = self.x_verts - self.t_bar                     # linear @ v_bar
        jl = so3_left_jacobian(self.params.delta_rot)
        g_rot = jl.T @ np.cross(rotated, g_vertex_cam).sum(axis=0)
        g_vb = g_vertex_cam @ self.linear
        if g_vbar is not None:
            g_vb = g_vb + g_vbar
        g_logs = (g_vb * self.v_bar).sum(axis=0)
        g_dv = g_vb * self.scale_axis
        return RefineParams(g_rot, g_t, g_logs, g_dv)


def make_chain(init: SimilarityTransform, params: RefineParams,
               vertices: np.ndarray, faces: np.ndarray,
               sample_faces: np.ndarray | None = None,
               sample_bary: np.ndarray | None = None) -> PoseChain:
    return PoseChain(init, params, vertices, faces, sample_faces, sample_bary)


def realized_pose(init: SimilarityTransform, params: RefineParams,
                  vertices: np.ndarray) -> tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """(rotation, translation, scale, deformed model vertices) under `params`."""
    chain = make_chain(init, params, np.asarray(vertices, dtype=np.float64),
                       faces=np.zeros((0, 3), dtype=np.int32))
    return chain.rot, chain.t_bar, init.s, chain.v_bar


# ---------------------------------------------------------------------------
# surface sampling


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted surface samples as (face_ids, barycentric) with a fixed seed.

    Barycentric coordinates stay constant over the run so gradients flow
    through the deformed vertices deterministically.
    """
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    prob = areas / areas.sum()
    face_ids = rng.choice(mesh.n_faces, size=n, p=prob)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    return face_ids.astype(np.int64), bary


# ---------------------------------------------------------------------------
# loss terms


def chamfer_loss(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Symmetric mean squared nearest-neighbor distance and its gradient in a.

    value = 0.5 * (mean_i min_j ||a_i-b_j||^2 + mean_j min_i ||b_j-a_i||^2);
    the gradient treats nearest-neighbor assignments as fixed.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptyCloudError("chamfer distance needs two non-empty clouds")
    tree_b = cKDTree(b)
    tree_a = cKDTree(a)
    d_ab, j_ab = tree_b.query(a)
    d_ba, i_ba = tree_a.query(b)
    na, nb = a.shape[0], b.shape[0]
    value = 0.5 * (float(np.mean(d_ab ** 2)) + float(np.mean(d_ba ** 2)))
    grad = (a - b[j_ab]) / na
    np.add.at(grad, i_ba, (a[i_ba] - b) / nb)
    return value, grad


@dataclass(frozen=True)
class MaskContext:
    """Precomputed silhouette data for the mask loss."""

    target_mask: np.ndarray        # (H,W) bool
    sdf: np.ndarray                # (H,W) float64 pixels, negative inside
    coverage_px: np.ndarray        # (T,2) pixel centers of interior samples
    tau_px: float                  # coverage slack in pixels
    diag_px: float                 # mask bbox diagonal, normalizes the surrogate


def build_mask_context(target_mask: np.ndarray, n_ref_samples: int = 1024,
                       max_coverage: int = 400, tau_px: float | None = None) -> MaskContext:
    mask = np.asarray(target_mask, dtype=bool)
    if not mask.any():
        raise EmptyCloudError("target mask is empty")
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(~mask)
    sdf = (outside - inside).astype(np.float64)
    iy, ix = np.nonzero(mask)
    area = iy.size
    stride = max(1, int(np.ceil(np.sqrt(area / max_coverage))))
    grid = np.zeros_like(mask)
    grid[::stride, ::stride] = True
    cy, cx = np.nonzero(mask & grid)
    coverage = np.stack([cx + 0.5, cy + 0.5], axis=1).astype(np.float64)
    if tau_px is None:
        # slack of a few projected-sample spacings: covered probes must sit
        # deep in the softplus tail or their pull biases the aligned optimum
        tau_px = float(max(4.0, 3.0 * np.sqrt(area / max(n_ref_samples, 1))))
    ys = np.array([iy.min(), iy.max() + 1], dtype=np.float64)
    xs = np.array([ix.min(), ix.max() + 1], dtype=np.float64)
    diag = float(np.hypot(xs[1] - xs[0], ys[1] - ys[0]))
    return MaskContext(mask, sdf, coverage, tau_px, diag)


def _bilinear_with_grad(grid: np.ndarray, u: np.ndarray, v: np.ndarray):
    h, w = grid.shape
    raw_x = u - 0.5
    raw_y = v - 0.5
    gx = np.clip(raw_x, 0.0, w - 1.000001)
    gy = np.clip(raw_y, 0.0, h - 1.000001)
    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    fx = gx - x0
    fy = gy - y0
    s00 = grid[y0, x0]
    s01 = grid[y0, x0 + 1]
    s10 = grid[y0 + 1, x0]
    s11 = grid[y0 + 1, x0 + 1]
    val = (1 - fy) * ((1 - fx) * s00 + fx * s01) + fy * ((1 - fx) * s10 + fx * s11)
    # clamped samples saturate, so their derivative along the pinned axis is 0
    in_x = (raw_x > 0.0) & (raw_x < w - 1.0)
    in_y = (raw_y > 0.0) & (raw_y < h - 1.0)
    d_du = np.where(in_x, (1 - fy) * (s01 - s00) + fy * (s11 - s10), 0.0)
    d_dv = np.where(in_y, (1 - fx) * (s10 - s00) + fx * (s11 - s01), 0.0)
    return val, d_du, d_dv


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class MaskLossResult:
    value: float                 # differentiable surrogate (pixel units)
    grad_points: np.ndarray      # (N,3) w.r.t. camera-frame sample points
    hard_iou: float | None       # silhouette IoU when a rendered mask was given
    n_outside: int               # samples projecting outside the target mask


def silhouette_iou(ref_mask: np.ndarray, target_mask: np.ndarray) -> float:
    r = np.asarray(ref_mask, dtype=bool)
    t = np.asarray(target_mask, dtype=bool)
    union = int((r | t).sum())
    if union == 0:
        return 0.0
    return float((r & t).sum() / union)


def mask_loss(points_cam: np.ndarray, ctx: MaskContext, k: CameraIntrinsics,
              ref_mask: np.ndarray | None = None) -> MaskLossResult:
    """Differentiable silhouette surrogate over projected surface samples.

    value = [ mean over samples of max(0, sdf(u,v))^2
            + mean over mask-interior probes of softplus(min distance - tau) ]
            / diag
    where diag is the target-mask bounding-box diagonal in pixels. Dividing
    once by the diagonal gives the surrogate the same slope scale as the hard
    1 - IoU loss it stands in for (whose sensitivity to a one-pixel silhouette
    shift is roughly perimeter/area ~ 1/diag), so the default unit weight is
    meaningful and the optimizer is not dominated by raw squared-pixel
    magnitudes. The hard IoU of a supplied rendered mask against the target
    mask is reported alongside for bookkeeping; the exact 1 - IoU loss is not
    differentiable without a soft rasterizer, which is out of scope.
    """
    pts = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    if n == 0:
        raise EmptyCloudError("no silhouette samples")
    z = pts[:, 2]
    if (z <= 1e-9).any():
        raise ValidationError("silhouette samples behind the camera")
    u = k.fx * pts[:, 0] / z + k.cx
    v = k.fy * pts[:, 1] / z + k.cy
    d = ctx.diag_px

    sdf_val, sdf_du, sdf_dv = _bilinear_with_grad(ctx.sdf, u, v)
    outside = sdf_val > 0.0
    out_term = float(np.mean(np.maximum(sdf_val, 0.0) ** 2)) / d
    g_u = np.where(outside, 2.0 * sdf_val * sdf_du, 0.0) / (n * d)
    g_v = np.where(outside, 2.0 * sdf_val * sdf_dv, 0.0) / (n * d)

    cov = ctx.coverage_px
    t_count = cov.shape[0]
    duv = np.stack([u, v], axis=1)
    diff = cov[:, None, :] - duv[None, :, :]          # (T, N, 2)
    dist = np.linalg.norm(diff, axis=2)
    nearest = np.argmin(dist, axis=1)
    dmin = dist[np.arange(t_count), nearest]
    cov_term = float(np.mean(_softplus(dmin - ctx.tau_px))) / d
    sig = _sigmoid(dmin - ctx.tau_px)
    safe = dmin > 1e-9
    # gradient flows to the winning projected point, pulling it toward the probe
    w_t = np.where(safe, sig / np.maximum(dmin, 1e-9), 0.0) / (t_count * d)
    pull = (duv[nearest] - cov) * w_t[:, None]
    g_cov = np.zeros((n, 2))
    np.add.at(g_cov, nearest, pull)
    g_u = g_u + g_cov[:, 0]
    g_v = g_v + g_cov[:, 1]

    # chain through the pinhole projection
    gx = g_u * (k.fx / z)
    gy = g_v * (k.fy / z)
    gz = -(g_u * k.fx * pts[:, 0] + g_v * k.fy * pts[:, 1]) / (z * z)
    grad = np.stack([gx, gy, gz], axis=1)

    hard = None
    if ref_mask is not None:
        hard = silhouette_iou(ref_mask, ctx.target_mask)
    return MaskLossResult(out_term + cov_term, grad, hard, int(outside.sum()))


def feature_pairs(ref_feats: np.ndarray, tgt_feats: np.ndarray,
                  beta_g: float,
                  ref_points: np.ndarray | None = None,
                  tgt_points: np.ndarray | None = None
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Mutual-nearest-neighbor pairs in feature cosine similarity above beta_g.

    When current positions are supplied (the every-few-steps refresh during
    optimization), candidates are still gated by feature similarity > beta_g
    but each side picks its spatially nearest admissible partner, so the
    pairing sharpens from semantic to geometric as the fit converges. Returns
    (ref_indices, tgt_indices); both empty when nothing qualifies.
    """
    a = normalize_rows(np.asarray(ref_feats, dtype=np.float64))
    b = normalize_rows(np.asarray(tgt_feats, dtype=np.float64))
    sim = a @ b.T
    ref_idx = np.arange(a.shape[0])
    if ref_points is None or tgt_points is None:
        r2t = np.argmax(sim, axis=1)
        t2r = np.argmax(sim, axis=0)
        mutual = t2r[r2t] == ref_idx
        strong = sim[ref_idx, r2t] > beta_g
        keep = mutual & strong
        return ref_idx[keep], r2t[keep]
    pr = np.asarray(ref_points, dtype=np.float64).reshape(-1, 3)
    pt = np.asarray(tgt_points, dtype=np.float64).reshape(-1, 3)
    dist = np.linalg.norm(pr[:, None, :] - pt[None, :, :], axis=2)
    gated = np.where(sim > beta_g, dist, np.inf)
    if not np.isfinite(gated).any():
        return np.array([], dtype=np.int64), np.array([], dtype=np.int64)
    r2t = np.argmin(gated, axis=1)
    t2r = np.argmin(gated, axis=0)
    admissible = np.isfinite(gated[ref_idx, r2t])
    mutual = t2r[r2t] == ref_idx
    keep = mutual & admissible
    return ref_idx[keep], r2t[keep]


def universal_alignment_loss(ref_points: np.ndarray, tgt_points: np.ndarray,
                             pairs: tuple[np.ndarray, np.ndarray]
                             ) -> tuple[float, np.ndarray, int]:
    """0.5 * sum of squared distances over admitted feature pairs.

    Returns (value, gradient w.r.t. ref_points, pair count); zero loss and
    gradient when no pair was admitted.
    """
    ref_points = np.asarray(ref_points, dtype=np.float64).reshape(-1, 3)
    tgt_points = np.asarray(tgt_points, dtype=np.float64).reshape(-1, 3)
    ri, ti = pairs
    grad = np.zeros_like(ref_points)
    if ri.size == 0:
        return 0.0, grad, 0
    diff = ref_points[ri] - tgt_points[ti]
    value = 0.5 * float((diff ** 2).sum())
    np.add.at(grad, ri, diff)
    return value, grad, int(ri.size)


def _mean_norm_with_grad(diff: np.ndarray) -> tuple[float, np.ndarray]:
    """mean_i ||diff_i|| with a zero-safe gradient."""
    n = diff.shape[0]
    norms = np.linalg.norm(diff, axis=1)
    value = float(norms.mean())
    safe = np.maximum(norms, 1e-12)
    grad = np.where(norms[:, None] > 0, diff / (n * safe[:, None]), 0.0)
    return value, grad


def pose_reg_loss(x_current: np.ndarray, x_initial: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-vertex distance between current and initially posed vertices."""
    return _mean_norm_with_grad(np.asarray(x_current) - np.asarray(x_initial))


def center_reg_loss(x_current: np.ndarray, x_initial: np.ndarray) -> tuple[float, np.ndarray]:
    """Distance between the posed centroids; gradient spread over vertices."""
    x = np.asarray(x_current, dtype=np.float64)
    c = x.mean(axis=0) - np.asarray(x_initial, dtype=np.float64).mean(axis=0)
    norm = float(np.linalg.norm(c))
    n = x.shape[0]
    if norm <= 0:
        return 0.0, np.zeros_like(x)
    grad = np.tile(c / (norm * n), (n, 1))
    return norm, grad


def deform_reg_loss(delta_v: np.ndarray) -> tuple[float, np.ndarray]:
    """Root-mean-square vertex displacement, ||delta_v||_F / sqrt(V)."""
    dv = np.asarray(delta_v, dtype=np.float64)
    nv = dv.shape[0]
    fro = float(np.linalg.norm(dv))
    if fro <= 0:
        return 0.0, np.zeros_like(dv)
    return fro / np.sqrt(nv), dv / (np.sqrt(nv) * fro)


@dataclass(frozen=True)
class MeshTopology:
    """Connectivity reused across refinement steps."""

    edges: np.ndarray           # (E,2) unique vertex pairs
    face_pairs: np.ndarray      # (P,2) faces sharing an edge
    neighbor_src: np.ndarray    # directed edges i->j flattened, source ids
    neighbor_dst: np.ndarray
    degree: np.ndarray          # (V,)

    @staticmethod
    def build(mesh: TriangleMesh) -> "MeshTopology":
        f = mesh.faces
        raw = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
        key = np.sort(raw, axis=1)
        uniq, inverse = np.unique(key, axis=0, return_inverse=True)
        # faces sharing an undirected edge
        face_of = np.tile(np.arange(f.shape[0]), 3)
        order = np.argsort(inverse, kind="stable")
        sorted_edges = inverse[order]
        sorted_faces = face_of[order]
        pairs = []
        i = 0
        while i < sorted_edges.size:
            j = i
            while j < sorted_edges.size and sorted_edges[j] == sorted_edges[i]:
                j += 1
            group = sorted_faces[i:j]
            for a in range(len(group)):
                for b in range(a + 1, len(group)):
                    pairs.append((group[a], group[b]))
            i = j
        face_pairs = (np.array(pairs, dtype=np.int64) if pairs
                      else np.zeros((0, 2), dtype=np.int64))
        src = np.concatenate([uniq[:, 0], uniq[:, 1]])
        dst = np.concatenate([uniq[:, 1], uniq[:, 0]])
        degree = np.zeros(mesh.n_vertices, dtype=np.int64)
        np.add.at(degree, src, 1)
        return MeshTopology(uniq, face_pairs, src, dst, degree)


def mesh_reg_losses(v_bar: np.ndarray, faces: np.ndarray, topo: MeshTopology
                    ) -> tuple[dict, np.ndarray]:
    """Edge, normal-consistency, and Laplacian smoothness terms on the
    deformed model vertices. Returns ({'edge','normal','laplacian'}, combined
    unweighted gradients per term stacked in a dict of arrays)."""
    v = np.asarray(v_bar, dtype=np.float64)
    nv = v.shape[0]
    out_vals: dict = {}
    grads: dict = {}

    # mean squared edge length
    e = topo.edges
    diff = v[e[:, 0]] - v[e[:, 1]]
    ne = max(e.shape[0], 1)
    out_vals["edge"] = float((diff ** 2).sum() / ne)
    g_edge = np.zeros_like(v)
    np.add.at(g_edge, e[:, 0], 2.0 * diff / ne)
    np.add.at(g_edge, e[:, 1], -2.0 * diff / ne)
    grads["edge"] = g_edge

    # normal consistency: mean (1 - cos) over adjacent face pairs
    g_norm = np.zeros_like(v)
    fp = topo.face_pairs
    if fp.shape[0] > 0:
        a = v[faces[:, 0]]
        b = v[faces[:, 1]]
        c = v[faces[:, 2]]
        n_raw = np.cross(b - a, c - a)
        n_len = np.linalg.norm(n_raw, axis=1)
        n_hat = n_raw / np.maximum(n_len, 1e-15)[:, None]
        f1, f2 = fp[:, 0], fp[:, 1]
        cospair = (n_hat[f1] * n_hat[f2]).sum(axis=1)
        npairs = fp.shape[0]
        out_vals["normal"] = float(np.mean(1.0 - cospair))
        # d(1-cos)/dn_hat_f1 = -n_hat_f2 / P, then back through normalization
        g_nhat = np.zeros_like(n_hat)
        np.add.at(g_nhat, f1, -n_hat[f2] / npairs)
        np.add.at(g_nhat, f2, -n_hat[f1] / npairs)
        proj = g_nhat - (g_nhat * n_hat).sum(axis=1, keepdims=True) * n_hat
        g_nraw = proj / np.maximum(n_len, 1e-15)[:, None]
        ca, cb, cc = (np.cross(g_nraw, c - b), np.cross(c - a, g_nraw),
                      np.cross(g_nraw, b - a))
        np.add.at(g_norm, faces[:, 0], ca)
        np.add.at(g_norm, faces[:, 1], cb)
        np.add.at(g_norm, faces[:, 2], cc)
    else:
        out_vals["normal"] = 0.0
    grads["normal"] = g_norm

    # uniform-umbrella Laplacian: mean ||mean_neighbor(v_j) - v_i||^2
    deg = np.maximum(topo.degree, 1)
    acc = np.zeros_like(v)
    np.add.at(acc, topo.neighbor_src, v[topo.neighbor_dst])
    lap = acc / deg[:, None] - v
    lap[topo.degree == 0] = 0.0
    active = int((topo.degree > 0).sum())
    nd = max(active, 1)
    out_vals["laplacian"] = float((lap ** 2).sum() / nd)
    g_lap = -2.0 * lap / nd
    contrib = 2.0 * lap / nd / deg[:, None]
    np.add.at(g_lap, topo.neighbor_dst, contrib[topo.neighbor_src])
    grads["laplacian"] = g_lap

    return out_vals, grads


# ---------------------------------------------------------------------------
# scene bundle, total loss, optimizer


@dataclass
class RefineScene:
    """Everything the objective needs, frozen for the duration of one run."""

    init_pose: SimilarityTransform
    mesh: TriangleMesh                     # canonical reference mesh
    topo: MeshTopology
    sample_faces: np.ndarray
    sample_bary: np.ndarray
    target_points: np.ndarray              # (N,3) camera frame
    mask_ctx: MaskContext
    intrinsics: CameraIntrinsics
    ref_feats: np.ndarray | None = None    # (S,C) frozen
    tgt_feats: np.ndarray | None = None    # (N,C) frozen
    weights: LossWeights = field(default_factory=LossWeights)
    x_initial: np.ndarray | None = None    # initially posed vertices, cached

    def __post_init__(self):
        self.weights.validate()
        if self.x_initial is None:
            base = make_chain(self.init_pose, RefineParams.zeros(self.mesh.n_vertices),
                              self.mesh.vertices, self.mesh.faces)
            self.x_initial = base.x_verts


def build_refine_scene(mesh: TriangleMesh, init_pose: SimilarityTransform,
                       target_points: np.ndarray, target_mask: np.ndarray,
                       k: CameraIntrinsics, n_samples: int = 512, seed: int = 0,
                       ref_feats: np.ndarray | None = None,
                       tgt_feats: np.ndarray | None = None,
                       weights: LossWeights | None = None) -> RefineScene:
    sample_faces, sample_bary = sample_surface(mesh, n_samples, seed=seed)
    return RefineScene(
        init_pose=init_pose,
        mesh=mesh,
        topo=MeshTopology.build(mesh),
        sample_faces=sample_faces,
        sample_bary=sample_bary,
        target_points=np.asarray(target_points, dtype=np.float64).reshape(-1, 3),
        mask_ctx=build_mask_context(target_mask, n_ref_samples=n_samples),
        intrinsics=k,
        ref_feats=ref_feats,
        tgt_feats=tgt_feats,
        weights=weights or LossWeights(),
    )


@dataclass
class RefineState:
    params: RefineParams
    step: int = 0
    breakdown: dict = field(default_factory=dict)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    pairs: tuple[np.ndarray, np.ndarray] | None = None
    positional_pairs: bool = False  # late-phase refreshes also use positions


def total_loss(state: RefineState, scene: RefineScene,
               ref_mask: np.ndarray | None = None) -> tuple[float, RefineParams, dict]:
    """Weighted objective, its gradient over the parameter block, and the
    per-term breakdown (raw, unweighted values plus the weighted total)."""
    w = scene.weights
    chain = make_chain(scene.init_pose, state.params, scene.mesh.vertices,
                       scene.mesh.faces, scene.sample_faces, scene.sample_bary)
    g_samples = np.zeros_like(chain.x_samples)
    g_verts = np.zeros((scene.mesh.n_vertices, 3))
    g_vbar = np.zeros((scene.mesh.n_vertices, 3))
    breakdown: dict = {}

    hard_iou = None
    if w.a_m > 0:
        mres = mask_loss(chain.x_samples, scene.mask_ctx, scene.intrinsics, ref_mask)
        breakdown["mask"] = mres.value
        g_samples += w.a_m * mres.grad_points
        hard_iou = mres.hard_iou
    else:
        breakdown["mask"] = 0.0

    if w.a_c > 0:
        c_val, c_grad = chamfer_loss(chain.x_samples, scene.target_points)
        breakdown["chamfer"] = c_val
        g_samples += w.a_c * c_grad
    else:
        breakdown["chamfer"] = 0.0

    if w.a_g > 0 and scene.ref_feats is not None and scene.tgt_feats is not None:
        if state.pairs is None:
            if state.positional_pairs:
                # late-phase refresh: frozen features gate the candidates,
                # current positions pick among them
                state.pairs = feature_pairs(scene.ref_feats, scene.tgt_feats,
                                            w.beta_g,
                                            ref_points=chain.x_samples,
                                            tgt_points=scene.target_points)
            else:
                state.pairs = feature_pairs(scene.ref_feats, scene.tgt_feats,
                                            w.beta_g)
        a_val, a_grad, n_pairs = universal_alignment_loss(
            chain.x_samples, scene.target_points, state.pairs)
        breakdown["align"] = a_val
        breakdown["align_pairs"] = n_pairs
        g_samples += w.a_g * a_grad
    else:
        breakdown["align"] = 0.0
        breakdown["align_pairs"] = 0

    if w.a_p > 0:
        p_val, p_grad = pose_reg_loss(chain.x_verts, scene.x_initial)
        breakdown["pose_reg"] = p_val
        g_verts += w.a_p * p_grad
    else:
        breakdown["pose_reg"] = 0.0

    if w.a_ce > 0:
        ce_val, ce_grad = center_reg_loss(chain.x_verts, scene.x_initial)
        breakdown["center_reg"] = ce_val
        g_verts += w.a_ce * ce_grad
    else:
        breakdown["center_reg"] = 0.0

    d_val, d_grad = deform_reg_loss(state.params.delta_v)
    breakdown["deform_reg"] = d_val

    mesh_vals, mesh_grads = mesh_reg_losses(chain.v_bar, scene.mesh.faces, scene.topo)
    breakdown.update(mesh_vals)
    g_vbar += (w.w_edge * mesh_grads["edge"] + w.w_normal * mesh_grads["normal"]
               + w.w_laplacian * mesh_grads["laplacian"])

    total = (w.a_m * breakdown["mask"] + w.a_c * breakdown["chamfer"]
             + w.a_g * breakdown["align"] + w.a_p * breakdown["pose_reg"]
             + w.a_ce * breakdown["center_reg"] + w.a_d * d_val
             + w.w_edge * mesh_vals["edge"] + w.w_normal * mesh_vals["normal"]
             + w.w_laplacian * mesh_vals["laplacian"])
    breakdown["total"] = total
    if hard_iou is not None:
        breakdown["hard_iou"] = hard_iou

    grads = chain.backward(g_samples=g_samples, g_verts=g_verts, g_vbar=g_vbar)
    grads.delta_v += w.a_d * d_grad
    state.breakdown = breakdown
    return total, grads, breakdown


DEFAULT_LEARNING_RATES = {"rot": 1e-2, "trans": 1e-2, "logs": 1e-2, "dv": 1e-3}


@dataclass
class RefineResult:
    pose: SimilarityTransform
    mesh: TriangleMesh            # deformed, canonical frame
    trace: list
    state: RefineState
    hard_iou_initial: float | None = None
    hard_iou_final: float | None = None


def adam_optimize(init_pose: SimilarityTransform, mesh: TriangleMesh,
                  scene: RefineScene, weights: LossWeights | None = None,
                  steps: int = 80,
                  learning_rates: dict | None = None,
                  lr_schedule: str = "cosine",
                  pair_refresh: int = 10,
                  positional_pairs: bool = False,
                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                  render_iou: bool = True) -> RefineResult:
    """Run Adam over the refinement parameters for `steps` iterations.

    Learning rates are per parameter group; `lr_schedule` is 'constant' or
    'cosine'. `positional_pairs` makes the every-`pair_refresh`-steps
    alignment-pair refresh use current positions among feature-gated
    candidates; the default recomputes from frozen features alone. Aborts
    with the full state dump if the loss goes non-finite.
    """
    if weights is not None:
        scene.weights = weights.validate()
    lrs = dict(DEFAULT_LEARNING_RATES)
    if learning_rates:
        lrs.update(learning_rates)
    state = RefineState(params=RefineParams.zeros(mesh.n_vertices))
    groups = ("rot", "trans", "logs", "dv")
    getters = {
        "rot": lambda p: p.delta_rot, "trans": lambda p: p.delta_t,
        "logs": lambda p: p.delta_log_s, "dv": lambda p: p.delta_v,
    }
    for g in groups:
        state.adam_m[g] = np.zeros_like(getters[g](state.params))
        state.adam_v[g] = np.zeros_like(getters[g](state.params))

    iou_init = None
    iou_final = None
    if render_iou:
        iou_init = _render_silhouette_iou(init_pose, mesh, state.params, scene)

    trace = []
    for step in range(steps):
        if pair_refresh > 0 and step % pair_refresh == 0:
            state.pairs = None
            state.positional_pairs = positional_pairs
        total, grads, breakdown = total_loss(state, scene)
        if not np.isfinite(total):
            raise OptimizationAbort(
                f"non-finite loss at step {step}",
                state_dump={"step": step, "breakdown": breakdown,
                            "params": state.params})
        row = {"step": step, **{k: v for k, v in breakdown.items()}}
        trace.append(row)

        if lr_schedule == "cosine":
            scale = 0.5 * (1.0 + np.cos(np.pi * step / max(steps, 1)))
        else:
            scale = 1.0
        t = step + 1
        for g in groups:
            grad = getters[g](grads)
            m = state.adam_m[g]
            v = state.adam_v[g]
            m[...] = beta1 * m + (1 - beta1) * grad
            v[...] = beta2 * v + (1 - beta2) * grad * grad
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            getters[g](state.params)[...] -= scale * lrs[g] * m_hat / (np.sqrt(v_hat) + eps)
        state.params.wrap_rotation()
        state.step = t

    final_total, _, final_breakdown = total_loss(state, scene)
    trace.append({"step": steps, **final_breakdown})
    if render_iou:
        iou_final = _render_silhouette_iou(init_pose, mesh, state.params, scene)

    chain = make_chain(init_pose, state.params, mesh.vertices, mesh.faces)
    deformed = replace(mesh, vertices=chain.v_bar)
    return RefineResult(pose=chain.pose(), mesh=deformed, trace=trace, state=state,
                        hard_iou_initial=iou_init, hard_iou_final=iou_final)


def _render_silhouette_iou(init_pose: SimilarityTransform, mesh: TriangleMesh,
                           params: RefineParams, scene: RefineScene) -> float:
    from .renderer import render

    chain = make_chain(init_pose, params, mesh.vertices, mesh.faces)
    posed = replace(mesh, vertices=chain.v_bar)
    out = render(posed, chain.pose(), scene.intrinsics, shade=False)
    return silhouette_iou(out.mask, scene.mask_ctx.target_mask)
