import numpy as np
import pytest

from catpose.errors import EmptyCloudError, OptimizationAbort
from catpose.geometry import (CameraIntrinsics, SimilarityTransform, TriangleMesh,
                              random_rotation, rot_z)
from catpose.refine import (LossWeights, MeshTopology, RefineParams, RefineScene,
                            RefineState, adam_optimize, build_mask_context,
                            build_refine_scene, center_reg_loss, chamfer_loss,
                            deform_reg_loss, feature_pairs, make_chain, mask_loss,
                            mesh_reg_losses, pose_reg_loss, realized_pose,
                            sample_surface, so3_left_jacobian, total_loss,
                            universal_alignment_loss)
from catpose.synth import make_shape

K = CameraIntrinsics(fx=120.0, fy=120.0, cx=80.0, cy=60.0, width=160, height=120)


def rel_err(analytic, numeric):
    denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return np.abs(analytic - numeric).max() / denom


def fd_grad(f, x, h=1e-4):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
        it.iternext()
    return g


def small_mesh(seed=0):
    rng = np.random.default_rng(seed)
    mesh = make_shape("cube", colorize=False)
    jitter = rng.normal(scale=0.01, size=mesh.vertices.shape)
    return TriangleMesh(mesh.vertices + jitter, mesh.faces)


def tiny_mesh():
    """20-vertex icosahedron-ish mesh for fast finite differencing."""
    phi = (1 + np.sqrt(5)) / 2
    verts = []
    for a in (-1, 1):
        for b in (-phi, phi):
            verts += [[0, a, b], [a, b, 0], [b, 0, a]]
    verts = np.unique(np.round(np.array(verts, dtype=np.float64), 9), axis=0)
    from scipy.spatial import ConvexHull

    hull = ConvexHull(verts)
    mesh = TriangleMesh(verts, hull.simplices.astype(np.int32))
    return mesh.normalized_to_canonical()


class TestRealizedPose:
    def test_zero_params_is_initial(self):
        mesh = small_mesh()
        init = SimilarityTransform(rot_z(30.0), [0.1, 0.0, 0.9], 1.4)
        rot, t, s, vbar = realized_pose(init, RefineParams.zeros(mesh.n_vertices),
                                        mesh.vertices)
        np.testing.assert_allclose(rot, init.r, atol=1e-12)
        np.testing.assert_allclose(t, init.t, atol=1e-12)
        assert s == init.s
        np.testing.assert_allclose(vbar, mesh.vertices, atol=1e-12)

    def test_translation_shift(self):
        mesh = small_mesh()
        init = SimilarityTransform.identity()
        params = RefineParams.zeros(mesh.n_vertices)
        params.delta_t = np.array([0.0, 0.0, 0.1])
        _, t, _, _ = realized_pose(init, params, mesh.vertices)
        np.testing.assert_allclose(t, [0, 0, 0.1])

    def test_per_axis_scale_doubles_x(self):
        mesh = small_mesh()
        params = RefineParams.zeros(mesh.n_vertices)
        params.delta_log_s = np.array([np.log(2.0), 0.0, 0.0])
        _, _, _, vbar = realized_pose(SimilarityTransform.identity(), params,
                                      mesh.vertices)
        np.testing.assert_allclose(vbar[:, 0], 2 * mesh.vertices[:, 0], atol=1e-12)
        np.testing.assert_allclose(vbar[:, 1:], mesh.vertices[:, 1:], atol=1e-12)

    def test_left_jacobian_matches_fd(self):
        rng = np.random.default_rng(1)
        from catpose.geometry import axis_angle_to_matrix

        for _ in range(10):
            w = rng.normal(scale=0.8, size=3)
            y = rng.normal(size=3)
            jl = so3_left_jacobian(w)
            jac = np.zeros((3, 3))
            h = 1e-6
            for i in range(3):
                wp = w.copy()
                wp[i] += h
                wm = w.copy()
                wm[i] -= h
                jac[:, i] = (axis_angle_to_matrix(wp) @ y
                             - axis_angle_to_matrix(wm) @ y) / (2 * h)
            ry = axis_angle_to_matrix(w) @ y
            skew_ry = np.array([[0, -ry[2], ry[1]], [ry[2], 0, -ry[0]],
                                [-ry[1], ry[0], 0]])
            np.testing.assert_allclose(jac, -skew_ry @ jl, atol=1e-6)


class TestChamfer:
    def test_identical_clouds_zero(self):
        pts = np.random.default_rng(0).normal(size=(30, 3))
        val, grad = chamfer_loss(pts, pts)
        assert val == 0.0
        np.testing.assert_allclose(grad, 0.0)

    def test_two_point_hand_value(self):
        val, _ = chamfer_loss(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]]))
        assert val == pytest.approx(1.0)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(12, 3))
        b = rng.normal(size=(15, 3))
        val, grad = chamfer_loss(a, b)
        num = fd_grad(lambda x: chamfer_loss(x.reshape(-1, 3), b)[0], a)
        assert rel_err(grad, num) < 1e-3

    def test_empty_cloud_rejected(self):
        with pytest.raises(EmptyCloudError):
            chamfer_loss(np.zeros((0, 3)), np.zeros((3, 3)))


class TestMaskLoss:
    def make_ctx(self, seed=0):
        mask = np.zeros((60, 80), dtype=bool)
        mask[18:42, 25:55] = True
        return build_mask_context(mask, n_ref_samples=64, max_coverage=40)

    def sample_points_inside(self, ctx, n=64, seed=0, margin=6):
        rng = np.random.default_rng(seed)
        iy, ix = np.nonzero(ctx.sdf < -margin)
        sel = rng.choice(iy.size, size=n)
        z = rng.uniform(0.6, 0.9, size=n)
        u = ix[sel] + rng.uniform(0.3, 0.7, size=n)
        v = iy[sel] + rng.uniform(0.3, 0.7, size=n)
        pts = np.stack([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z], axis=1)
        return pts

    def test_aligned_case_near_zero(self):
        ctx = self.make_ctx()
        # dense samples covering the whole mask interior
        iy, ix = np.nonzero(ctx.target_mask)
        z = 0.8
        pts = np.stack([(ix + 0.5 - K.cx) * z / K.fx,
                        (iy + 0.5 - K.cy) * z / K.fy,
                        np.full(iy.size, z)], axis=1)
        res = mask_loss(pts, ctx, K, ref_mask=ctx.target_mask)
        assert res.value < 0.1
        assert res.hard_iou == 1.0

    def test_disjoint_silhouettes_hard_loss_one(self):
        ctx = self.make_ctx()
        other = np.zeros_like(ctx.target_mask)
        other[2:10, 2:10] = True
        res = mask_loss(self.sample_points_inside(ctx), ctx, K, ref_mask=other)
        assert 1.0 - res.hard_iou == 1.0

    def test_gradient_matches_fd(self):
        ctx = self.make_ctx()
        rng = np.random.default_rng(2)
        # points partly outside so the sdf branch is active; keep away from
        # sdf cell boundaries and coverage argmin switches
        pts = self.sample_points_inside(ctx, n=40, seed=3, margin=2)
        pts[:10, 0] += 25.0 * 0.7 / K.fx  # push some samples out of the mask
        val, grad = mask_loss(pts, ctx, K).value, mask_loss(pts, ctx, K).grad_points
        num = fd_grad(lambda x: mask_loss(x.reshape(-1, 3), ctx, K).value,
                      pts, h=1e-6)
        assert rel_err(grad, num) < 1e-3

    def test_empty_mask_rejected(self):
        with pytest.raises(EmptyCloudError):
            build_mask_context(np.zeros((10, 10), dtype=bool))


class TestAlignment:
    def test_identical_clouds_identity_pairs_zero_loss(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(20, 3))
        feats = rng.normal(size=(20, 8))
        ri, ti = feature_pairs(feats, feats, beta_g=0.8)
        assert len(ri) == 20
        np.testing.assert_array_equal(ri, ti)
        val, grad, n = universal_alignment_loss(pts, pts, (ri, ti))
        assert val == 0.0 and n == 20
        np.testing.assert_allclose(grad, 0.0)

    def test_translation_closed_form(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(25, 3))
        feats = rng.normal(size=(25, 6))
        pairs = feature_pairs(feats, feats, beta_g=0.8)
        shifted = pts + np.array([0.1, 0.0, 0.0])
        val, grad, n = universal_alignment_loss(shifted, pts, pairs)
        assert n == 25
        assert val == pytest.approx(0.5 * 25 * 0.01)
        np.testing.assert_allclose(grad, np.tile([0.1, 0, 0], (25, 1)), atol=1e-12)

    def test_threshold_above_similarity_empty(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(10, 4))
        b = -a  # cosine -1 against themselves
        ri, ti = feature_pairs(a, b, beta_g=0.999)
        val, grad, n = universal_alignment_loss(rng.normal(size=(10, 3)),
                                                rng.normal(size=(10, 3)), (ri, ti))
        assert n == 0 and val == 0.0

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        ref = rng.normal(size=(15, 3))
        tgt = rng.normal(size=(18, 3))
        rfeat = rng.normal(size=(15, 5))
        tfeat = rng.normal(size=(18, 5))
        pairs = feature_pairs(rfeat, tfeat, beta_g=-1.0)
        val, grad, _ = universal_alignment_loss(ref, tgt, pairs)
        num = fd_grad(lambda x: universal_alignment_loss(
            x.reshape(-1, 3), tgt, pairs)[0], ref)
        assert rel_err(grad, num) < 1e-3


class TestRegularizers:
    def test_zero_params_all_zero(self):
        mesh = small_mesh()
        init = SimilarityTransform(rot_z(20.0), [0, 0, 1.0], 1.2)
        chain = make_chain(init, RefineParams.zeros(mesh.n_vertices),
                           mesh.vertices, mesh.faces)
        x0 = chain.x_verts
        assert pose_reg_loss(chain.x_verts, x0)[0] == 0.0
        assert center_reg_loss(chain.x_verts, x0)[0] == 0.0
        assert deform_reg_loss(np.zeros((mesh.n_vertices, 3)))[0] == 0.0

    def test_pose_reg_pure_translation(self):
        mesh = small_mesh()
        x0 = mesh.vertices
        val, _ = pose_reg_loss(x0 + np.array([0, 0, 0.01]), x0)
        assert val == pytest.approx(0.01)

    def test_center_reg_rotation_about_centroid_is_zero(self):
        mesh = small_mesh()
        x0 = mesh.vertices
        centroid = x0.mean(axis=0)
        rotated = (x0 - centroid) @ rot_z(25.0).T + centroid
        val, _ = center_reg_loss(rotated, x0)
        assert val == pytest.approx(0.0, abs=1e-12)

    def test_deform_reg_single_vertex_rms(self):
        dv = np.zeros((16, 3))
        dv[3] = [3.0, 4.0, 0.0]
        val, _ = deform_reg_loss(dv)
        assert val == pytest.approx(5.0 / 4.0)  # 5 / sqrt(16)

    def test_reg_gradients_match_fd(self):
        rng = np.random.default_rng(4)
        x0 = rng.normal(size=(12, 3))
        x = x0 + rng.normal(scale=0.05, size=(12, 3))
        for fn in (pose_reg_loss, center_reg_loss):
            val, grad = fn(x, x0)
            num = fd_grad(lambda v: fn(v.reshape(-1, 3), x0)[0], x)
            assert rel_err(grad, num) < 1e-3
        dv = rng.normal(scale=0.05, size=(12, 3))
        val, grad = deform_reg_loss(dv)
        num = fd_grad(lambda v: deform_reg_loss(v.reshape(-1, 3))[0], dv)
        assert rel_err(grad, num) < 1e-3


class TestMeshRegs:
    def test_flat_grid_laplacian_near_zero(self):
        n = 5
        lin = np.linspace(0, 1, n)
        uu, vv = np.meshgrid(lin, lin)
        verts = np.stack([uu.ravel(), vv.ravel(), np.zeros(n * n)], axis=1)
        faces = []
        for r in range(n - 1):
            for c in range(n - 1):
                i0 = r * n + c
                faces.append([i0, i0 + n, i0 + 1])
                faces.append([i0 + 1, i0 + n, i0 + n + 1])
        mesh = TriangleMesh(verts, np.array(faces, dtype=np.int32))
        topo = MeshTopology.build(mesh)
        vals, _ = mesh_reg_losses(mesh.vertices, mesh.faces, topo)
        # umbrella vectors vanish at interior vertices of a regular planar grid
        neighbors = {i: [] for i in range(n * n)}
        for a, b in topo.edges:
            neighbors[int(a)].append(int(b))
            neighbors[int(b)].append(int(a))
        for r in range(1, n - 1):
            for c in range(1, n - 1):
                i = r * n + c
                umbrella = np.mean(verts[neighbors[i]], axis=0) - verts[i]
                assert np.linalg.norm(umbrella) < 1e-12
        assert vals["normal"] == pytest.approx(0.0, abs=1e-12)

    def test_edge_loss_quadratic_scaling(self):
        mesh = small_mesh()
        topo = MeshTopology.build(mesh)
        v1, _ = mesh_reg_losses(mesh.vertices, mesh.faces, topo)
        v2, _ = mesh_reg_losses(2.0 * mesh.vertices, mesh.faces, topo)
        assert v2["edge"] == pytest.approx(4.0 * v1["edge"], rel=1e-9)

    def test_gradients_match_fd(self):
        mesh = tiny_mesh()
        topo = MeshTopology.build(mesh)
        rng = np.random.default_rng(5)
        v = mesh.vertices + rng.normal(scale=0.01, size=mesh.vertices.shape)
        vals, grads = mesh_reg_losses(v, mesh.faces, topo)
        for term in ("edge", "normal", "laplacian"):
            num = fd_grad(lambda x: mesh_reg_losses(
                x.reshape(-1, 3), mesh.faces, topo)[0][term], v, h=1e-5)
            assert rel_err(grads[term], num) < 1e-3, term


def build_test_scene(seed=0, mesh=None, weights=None):
    rng = np.random.default_rng(seed)
    mesh = mesh or tiny_mesh()
    init = SimilarityTransform(random_rotation(rng), [0.02, -0.01, 0.8], 0.25)
    from catpose.renderer import render

    out = render(mesh, init, K, shade=False)
    target_pts = rng.normal(scale=0.05, size=(64, 3)) + np.array([0, 0, 0.8])
    scene = build_refine_scene(mesh, init, target_pts, out.mask, K,
                               n_samples=48, seed=seed,
                               weights=weights or LossWeights())
    scene.ref_feats = rng.normal(size=(48, 6))
    scene.tgt_feats = rng.normal(size=(64, 6))
    return scene, mesh


class TestTotalLoss:
    def test_all_weights_zero(self):
        scene, mesh = build_test_scene(
            weights=LossWeights(a_m=0, a_c=0, a_g=0, a_p=0, a_ce=0, a_d=0,
                                w_edge=0, w_normal=0, w_laplacian=0))
        state = RefineState(params=RefineParams.zeros(mesh.n_vertices))
        total, grads, breakdown = total_loss(state, scene)
        assert total == 0.0

    def test_breakdown_sums_to_total(self):
        scene, mesh = build_test_scene(seed=1)
        rng = np.random.default_rng(2)
        state = RefineState(params=RefineParams(
            rng.normal(scale=0.05, size=3), rng.normal(scale=0.01, size=3),
            rng.normal(scale=0.02, size=3),
            rng.normal(scale=0.003, size=(mesh.n_vertices, 3))))
        total, _, b = total_loss(state, scene)
        w = scene.weights
        recon = (w.a_m * b["mask"] + w.a_c * b["chamfer"] + w.a_g * b["align"]
                 + w.a_p * b["pose_reg"] + w.a_ce * b["center_reg"]
                 + w.a_d * b["deform_reg"] + w.w_edge * b["edge"]
                 + w.w_normal * b["normal"] + w.w_laplacian * b["laplacian"])
        assert total == pytest.approx(recon, abs=1e-9)

    def test_invariant_under_cloud_and_face_reordering(self):
        scene, mesh = build_test_scene(seed=3)
        rng = np.random.default_rng(4)
        params = RefineParams(
            rng.normal(scale=0.03, size=3), rng.normal(scale=0.01, size=3),
            rng.normal(scale=0.01, size=3),
            rng.normal(scale=0.002, size=(mesh.n_vertices, 3)))
        t1, _, _ = total_loss(RefineState(params=params.copy()), scene)
        perm = rng.permutation(scene.target_points.shape[0])
        scene2, _ = build_test_scene(seed=3)
        scene2.target_points = scene.target_points[perm]
        scene2.tgt_feats = scene.tgt_feats[perm]
        t2, _, _ = total_loss(RefineState(params=params.copy()), scene2)
        assert t1 == pytest.approx(t2, abs=1e-9)

    def test_full_chained_gradient_matches_fd(self):
        scene, mesh = build_test_scene(seed=5)
        rng = np.random.default_rng(6)
        params = RefineParams(
            rng.normal(scale=0.05, size=3), rng.normal(scale=0.005, size=3),
            rng.normal(scale=0.02, size=3),
            rng.normal(scale=0.002, size=(mesh.n_vertices, 3)))
        state = RefineState(params=params)
        state.pairs = feature_pairs(scene.ref_feats, scene.tgt_feats,
                                    scene.weights.beta_g)
        _, grads, _ = total_loss(state, scene)

        def f(vec):
            p = unpack(vec)
            st = RefineState(params=p)
            st.pairs = state.pairs
            return total_loss(st, scene)[0]

        def pack(p):
            return np.concatenate([p.delta_rot, p.delta_t, p.delta_log_s,
                                   p.delta_v.ravel()])

        def unpack(vec):
            nv = mesh.n_vertices
            return RefineParams(vec[0:3].copy(), vec[3:6].copy(), vec[6:9].copy(),
                                vec[9:].reshape(nv, 3).copy())

        x = pack(params)
        num = fd_grad(f, x, h=1e-5)
        ana = pack(grads)
        assert rel_err(ana, num) < 1e-3


class TestAdamOptimize:
    def test_fixed_point_at_ground_truth(self):
        mesh = make_shape("house")
        rng = np.random.default_rng(7)
        gt = SimilarityTransform(random_rotation(rng), [0.0, 0.0, 0.9], 0.25)
        from catpose.geometry import mask_to_cloud, rotation_geodesic_deg
        from catpose.renderer import render

        out = render(mesh, gt, K, shade=False)
        cloud = mask_to_cloud(out.depth, out.mask, K, stride=2)
        scene = build_refine_scene(mesh, gt, cloud.points, out.mask, K,
                                   n_samples=256, seed=0)
        base = make_chain(gt, RefineParams.zeros(mesh.n_vertices), mesh.vertices,
                          mesh.faces, scene.sample_faces, scene.sample_bary)
        scene.ref_feats = base.samples_model + 1.0
        scene.tgt_feats = gt.invert().apply(cloud.points) + 1.0
        res = adam_optimize(gt, mesh, scene, steps=40, render_iou=False)
        assert rotation_geodesic_deg(res.pose.r, gt.r) < 0.2
        assert np.linalg.norm(res.pose.t - gt.t) < 1e-3

    def test_nonfinite_aborts_with_dump(self):
        scene, mesh = build_test_scene(seed=8)
        scene.target_points = scene.target_points * np.inf
        with pytest.raises((OptimizationAbort, ValueError)):
            adam_optimize(scene.init_pose, mesh, scene, steps=3, render_iou=False)

    def test_trace_has_breakdown_per_step(self):
        scene, mesh = build_test_scene(seed=9)
        res = adam_optimize(scene.init_pose, mesh, scene, steps=5, render_iou=False)
        assert len(res.trace) == 6
        assert all("total" in row for row in res.trace)
