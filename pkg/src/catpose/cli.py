"""Command-line pipeline: scene ingestion, estimation, rendering, evaluation.

Exit codes: 0 success, 2 input validation, 3 estimation failure, 4 provider
failure. All machine-readable outputs are written with sorted keys so a rerun
with identical inputs and seed is byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .coarse import PoseEstimate, coarse_estimate, run_single_view
from .errors import (CatposeError, EstimationFailedError, FormatError,
                     ProviderError, ValidationError)
from .geometry import (SimilarityTransform, load_obj, mask_to_cloud,
                       read_intrinsics, save_obj, write_depth, write_mask)
from .imageio import write_png_rgb
from .matching import (cyclical_distances, foreground_patches, score_matrix,
                       select_correspondences)
from .metrics import (OrientedBox, SymmetrySpec, accuracy_table, format_table,
                      iou3d, pose_error)
from .providers import ViewImage
from .refine import adam_optimize, build_refine_scene
from .renderer import canonical_view_poses, render
from .scene import PipelineConfig, SceneDirectory, load_scene, make_provider
from .synth import SynthSpec, build_scene, write_scene
from .tensorio import combine_features, pca_reduce_pair


def _dump_json(obj: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "provider", None):
        cfg.provider_mode = args.provider
    if getattr(args, "provider_cmd", None):
        cfg.provider_command = args.provider_cmd.split()
        cfg.provider_mode = "subprocess"
    if getattr(args, "iters", None) is not None:
        cfg.coarse_iters = args.iters
    if getattr(args, "steps", None) is not None:
        cfg.refine_steps = args.steps
    return cfg.validate()


def _refine_features(provider, init_pose, target_points, chain_samples):
    ref_feats = provider.features3d(chain_samples, role="reference",
                                    frame_pose=init_pose)
    tgt_feats = provider.features3d(target_points, role="target",
                                    frame_pose=init_pose)
    return ref_feats, tgt_feats


def _run_refinement(scene: SceneDirectory, cfg: PipelineConfig, provider,
                    init: PoseEstimate):
    from .refine import make_chain, RefineParams

    target_cloud = mask_to_cloud(scene.depth, scene.mask, scene.intrinsics,
                                 stride=cfg.refine_stride)
    rscene = build_refine_scene(
        scene.mesh, init.transform, target_cloud.points, scene.mask,
        scene.intrinsics, n_samples=cfg.refine_samples, seed=cfg.seed,
        weights=cfg.weights())
    base = make_chain(init.transform, RefineParams.zeros(scene.mesh.n_vertices),
                      scene.mesh.vertices, scene.mesh.faces,
                      rscene.sample_faces, rscene.sample_bary)
    rscene.ref_feats, rscene.tgt_feats = _refine_features(
        provider, init.transform, rscene.target_points, base.samples_model)
    result = adam_optimize(init.transform, scene.mesh, rscene,
                           steps=cfg.refine_steps,
                           learning_rates=cfg.learning_rates,
                           lr_schedule=cfg.lr_schedule)
    return result


def _write_trace_csv(trace: list[dict], path: Path) -> None:
    keys = sorted({k for row in trace for k in row})
    keys.remove("step")
    keys = ["step"] + keys
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: row.get(k, "") for k in keys})


def cmd_synth(args) -> int:
    provider_kwargs = {
        "noise_sigma": args.feature_noise,
        "corruption_per_deg": args.corruption_per_deg,
        "seed": args.seed,
        "embed_dim": args.embed_dim,
    }
    from .providers import SyntheticProviderConfig

    spec = SynthSpec(shape=args.shape, width=args.width, height=args.height,
                     seed=args.seed, depth_noise=args.depth_noise,
                     provider=SyntheticProviderConfig(**provider_kwargs))
    scene = build_scene(spec)
    out = write_scene(scene, args.out)
    _dump_json(PipelineConfig(seed=args.seed).to_json(), out / "config.json")
    print(f"scene written to {out}")
    return 0


def cmd_estimate(args) -> int:
    cfg = _load_config(args)
    scene = load_scene(args.scene)
    provider = make_provider(scene, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    timings = {}
    try:
        t0 = time.perf_counter()
        est, diags = coarse_estimate(scene.observation(), scene.mesh, provider,
                                     cfg.coarse_config())
        timings["coarse_s"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        result = _run_refinement(scene, cfg, provider, est)
        timings["refine_s"] = time.perf_counter() - t0
    finally:
        provider.close()

    refined = PoseEstimate(transform=result.pose, confidence=est.confidence,
                           view_index=est.view_index,
                           iterations_run=est.iterations_run,
                           inlier_count=est.inlier_count)
    _dump_json(refined.to_json(), out_dir / "pose.json")
    _dump_json(est.to_json(), out_dir / "pose_coarse.json")
    save_obj(result.mesh, out_dir / "refined_mesh.obj")
    _write_trace_csv(result.trace, out_dir / "loss_trace.csv")
    report = {
        "config": cfg.to_json(),
        "timings": timings,
        "views": [{"view_index": d.view_index, "ok": d.ok, "message": d.message,
                   "confidence": d.confidence, "inlier_count": d.inlier_count}
                  for d in diags],
        "hard_iou_initial": result.hard_iou_initial,
        "hard_iou_final": result.hard_iou_final,
        "final_loss": result.trace[-1].get("total"),
    }
    _dump_json(report, out_dir / "report.json")
    print(f"pose written to {out_dir / 'pose.json'}")
    return 0


def cmd_coarse(args) -> int:
    cfg = _load_config(args)
    scene = load_scene(args.scene)
    provider = make_provider(scene, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        if args.view is not None:
            views = canonical_view_poses(scene.mesh.diameter(), scene.intrinsics)
            if not (0 <= args.view < len(views)):
                raise ValidationError(f"view index {args.view} out of range 0..3")
            est, corr = run_single_view(scene.observation(), scene.mesh,
                                        views[args.view], provider,
                                        cfg.coarse_config(), view_index=args.view)
            diags = []
        else:
            est, diags = coarse_estimate(scene.observation(), scene.mesh, provider,
                                         cfg.coarse_config())
    finally:
        provider.close()
    _dump_json(est.to_json(), out_dir / "pose.json")
    report = {"config": cfg.to_json(),
              "views": [{"view_index": d.view_index, "ok": d.ok,
                         "message": d.message, "confidence": d.confidence}
                        for d in diags]}
    _dump_json(report, out_dir / "report.json")
    print(f"coarse pose written to {out_dir / 'pose.json'}")
    return 0


def cmd_refine(args) -> int:
    cfg = _load_config(args)
    scene = load_scene(args.scene)
    pose_obj = json.loads(Path(args.pose).read_text())
    init = PoseEstimate(transform=SimilarityTransform.from_json(pose_obj),
                        confidence=float(pose_obj.get("confidence", 0.0)),
                        view_index=int(pose_obj.get("view_index", 0)),
                        iterations_run=0, inlier_count=0)
    provider = make_provider(scene, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = _run_refinement(scene, cfg, provider, init)
    finally:
        provider.close()
    refined = PoseEstimate(transform=result.pose, confidence=init.confidence,
                           view_index=init.view_index, iterations_run=0,
                           inlier_count=0)
    _dump_json(refined.to_json(), out_dir / "pose.json")
    save_obj(result.mesh, out_dir / "refined_mesh.obj")
    _write_trace_csv(result.trace, out_dir / "loss_trace.csv")
    _dump_json({"config": cfg.to_json(),
                "hard_iou_initial": result.hard_iou_initial,
                "hard_iou_final": result.hard_iou_final},
               out_dir / "report.json")
    print(f"refined pose written to {out_dir / 'pose.json'}")
    return 0


def cmd_match(args) -> int:
    cfg = _load_config(args)
    scene = load_scene(args.scene)
    provider = make_provider(scene, cfg)
    ccfg = cfg.coarse_config()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        views = canonical_view_poses(scene.mesh.diameter(), scene.intrinsics)
        view_pose = views[args.view]
        out = render(scene.mesh, view_pose, scene.intrinsics, shade=True)
        obs = scene.observation()
        ref_maps = provider.features2d(ViewImage(
            kind="render", depth=out.depth, mask=out.mask,
            intrinsics=scene.intrinsics, pose=view_pose, rgb=out.shaded,
            tag=f"v{args.view}_it0"))
        tgt_maps = provider.features2d(ViewImage(
            kind="target", depth=obs.depth, mask=obs.mask,
            intrinsics=scene.intrinsics, rgb=obs.rgb, tag="target"))
    finally:
        provider.close()
    w = ccfg.weights
    ref_fused = combine_features([(m, w.weight_for(m.source_tag)) for m in ref_maps])
    tgt_fused = combine_features([(m, w.weight_for(m.source_tag)) for m in tgt_maps])
    if tgt_fused.channels > ccfg.pca_dims:
        tgt_fused, ref_fused = pca_reduce_pair(tgt_fused, ref_fused, ccfg.pca_dims)
    s = score_matrix(tgt_fused, ref_fused)
    d = cyclical_distances(s)
    valid = foreground_patches(scene.mask, tgt_fused, ccfg.mask_min_frac)
    corr = select_correspondences(s, d, min(ccfg.m, s.n_target), valid_target=valid)
    lines = [json.dumps(pair, sort_keys=True) for pair in corr.pairs()]
    (out_dir / "correspondences.jsonl").write_text("\n".join(lines) + "\n")
    if args.overlay:
        _write_overlay(scene, out, corr, tgt_fused, ref_fused, out_dir / "overlay.png")
    print(f"{len(corr)} correspondences written to {out_dir / 'correspondences.jsonl'}")
    return 0


def _write_overlay(scene, render_out, corr, tgt_fm, ref_fm, path: Path) -> None:
    from .geometry import patch_to_pixel

    h, w = scene.depth.shape
    canvas = np.zeros((h, 2 * w, 3), dtype=np.float64)
    if scene.rgb is not None:
        canvas[:, :w] = scene.rgb
    else:
        canvas[:, :w, 0] = scene.mask * 0.5
    canvas[:, w:] = render_out.shaded if render_out.shaded is not None else 0.0
    img = (canvas * 255).astype(np.uint8)
    for i in range(len(corr)):
        tu, tv = patch_to_pixel(int(corr.p[i]), tgt_fm)
        ru, rv = patch_to_pixel(int(corr.q[i]), ref_fm)
        color = np.array([64 + (191 * i) // max(len(corr), 1), 220, 96], dtype=np.uint8)
        _draw_line(img, (tu, tv), (ru + w, rv), color)
    write_png_rgb(img, path)


def _draw_line(img: np.ndarray, p0, p1, color) -> None:
    n = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1]), 1))
    for t in np.linspace(0.0, 1.0, n + 1):
        x = int(round(p0[0] + t * (p1[0] - p0[0])))
        y = int(round(p0[1] + t * (p1[1] - p0[1])))
        if 0 <= y < img.shape[0] and 0 <= x < img.shape[1]:
            img[y, x] = color


def cmd_render(args) -> int:
    mesh = load_obj(args.mesh)
    if args.canonical:
        mesh = mesh.normalized_to_canonical()
    k = read_intrinsics(args.intrinsics)
    pose = SimilarityTransform.from_json(json.loads(Path(args.pose).read_text()))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = render(mesh, pose, k, shade=True)
    write_depth(out.depth, out_dir / "depth.uftn")
    write_mask(out.mask, out_dir / "mask.png")
    write_png_rgb(out.shaded, out_dir / "shaded.png")
    print(f"render written to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        raise ValidationError("prediction and ground-truth directories must exist")
    sym = SymmetrySpec()
    results = []
    per_instance = {}
    for gt_path in sorted(gt_dir.glob("*.json")):
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            raise ValidationError(f"missing prediction for {gt_path.name}")
        gt_obj = json.loads(gt_path.read_text())
        pred_obj = json.loads(pred_path.read_text())
        gt_tf = SimilarityTransform.from_json(gt_obj)
        pred_tf = SimilarityTransform.from_json(pred_obj)
        category = gt_obj.get("category")
        extents = np.array(gt_obj.get("extents", [1.0, 1.0, 1.0]), dtype=np.float64)
        err = pose_error(pred_tf, gt_tf, sym, category)
        iou = iou3d(OrientedBox(pred_tf, extents), OrientedBox(gt_tf, extents),
                    samples=args.samples, seed=args.seed)
        results.append((err, iou))
        per_instance[gt_path.stem] = {
            "rot_deg": err[0], "trans_cm": err[1], "iou": iou,
            "category": category,
        }
    table = accuracy_table(results)
    metrics = {
        "table": table,
        "per_instance": per_instance,
        "box_convention": "predicted scale times canonical extents",
        "seed": args.seed,
        "samples": args.samples,
    }
    _dump_json(metrics, Path(args.out))
    text = format_table({"all": table})
    if args.table:
        Path(args.table).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="catpose",
        description="Zero-shot category-level 6-DOF pose estimation pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--shape", default="house", choices=["cube", "sphere", "ellipsoid", "house"])
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depth-noise", type=float, default=0.0)
    p.add_argument("--feature-noise", type=float, default=0.0)
    p.add_argument("--corruption-per-deg", type=float, default=0.0)
    p.add_argument("--embed-dim", type=int, default=4)
    p.set_defaults(func=cmd_synth)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="pipeline config JSON")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--provider", default=None,
                        choices=["synthetic", "files", "subprocess"])
    common.add_argument("--provider-cmd", default=None,
                        help="extractor command line (implies subprocess mode)")

    p = sub.add_parser("estimate", parents=[common],
                       help="coarse estimation followed by refinement")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("coarse", parents=[common], help="coarse estimation only")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--view", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.set_defaults(func=cmd_coarse)

    p = sub.add_parser("refine", parents=[common], help="refine an existing pose")
    p.add_argument("--scene", required=True)
    p.add_argument("--pose", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("match", parents=[common],
                       help="dump correspondences for one reference view")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--overlay", action="store_true")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("render", help="render a mesh under a pose")
    p.add_argument("--mesh", required=True)
    p.add_argument("--pose", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--canonical", action="store_true",
                   help="rescale the mesh into the canonical frame first")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--table", default=None)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except EstimationFailedError as e:
        print(f"estimation failed: {e}", file=sys.stderr)
        return 3
    except ProviderError as e:
        print(f"provider failure: {e}", file=sys.stderr)
        return 4
    except CatposeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
