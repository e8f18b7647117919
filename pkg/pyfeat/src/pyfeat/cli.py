"""pyfeat command line: extraction, view rendering, and protocol serving."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .extract2d import BACKENDS, ExtractorConfig, extract_to_files, make_extractors


def _config_from_args(args) -> ExtractorConfig:
    return ExtractorConfig(
        models=args.models.split(","),
        patch_size=args.patch_size,
        image_size=args.image_size,
        device=args.device,
        checkpoint_dir=args.checkpoint_dir,
        stub_channels=args.stub_channels,
    )


def cmd_extract2d(args) -> int:
    cfg = _config_from_args(args)
    written = extract_to_files(args.image, args.out_stem, cfg)
    for path in written:
        print(path)
    return 0


def cmd_extract3d(args) -> int:
    from .dgcnn import PointFeatureExtractor
    from .uftn import read_tensor, write_tensor

    points = read_tensor(args.cloud)
    extractor = PointFeatureExtractor(args.checkpoint, seed=args.seed)
    feats = extractor.extract(points)
    write_tensor(feats, args.out)
    print(f"{args.out}: {feats.shape[0]} x {feats.shape[1]}"
          + ("" if extractor.pretrained else " (randomly initialized encoder)"))
    return 0


def cmd_render_views(args) -> int:
    from .render import canonical_views, load_textured_obj

    mesh = load_textured_obj(args.mesh).normalized()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    views = canonical_views(mesh, fx=args.focal, fy=args.focal,
                            cx=args.size / 2, cy=args.size / 2,
                            width=args.size, height=args.size)
    from PIL import Image

    for i, view in enumerate(views):
        img = (np.clip(view["rgb"], 0, 1) * 255).astype(np.uint8)
        Image.fromarray(img).save(out_dir / f"view{i}.png")
        print(out_dir / f"view{i}.png")
    return 0


def cmd_probe(args) -> int:
    cfg = _config_from_args(args)
    status = {}
    for name in BACKENDS:
        cfg_probe = ExtractorConfig(models=[name], checkpoint_dir=args.checkpoint_dir)
        ext = make_extractors(cfg_probe)[0]
        status[name] = {"available": ext.available(),
                        "channels": ext.channels() if ext.available() else None}
    print(json.dumps(status, indent=2, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    from .serve import ProtocolServer

    cfg = _config_from_args(args)
    server = ProtocolServer(cfg, dgcnn_checkpoint=args.dgcnn_checkpoint,
                            dgcnn_seed=args.seed)
    return server.run()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pyfeat",
                                     description="feature extraction sidecar")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--models", default="patchstats",
                        help="comma list: patchstats,dinov1,dinov2,sd")
    common.add_argument("--patch-size", type=int, default=14)
    common.add_argument("--image-size", type=int, default=448)
    common.add_argument("--device", default="cpu")
    common.add_argument("--checkpoint-dir", default=None)
    common.add_argument("--stub-channels", type=int, default=24)

    p = sub.add_parser("extract2d", parents=[common],
                       help="write one feature file per model")
    p.add_argument("--image", required=True)
    p.add_argument("--out-stem", required=True)
    p.set_defaults(func=cmd_extract2d)

    p = sub.add_parser("extract3d", help="per-point features for a cloud")
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_extract3d)

    p = sub.add_parser("render-views", help="four canonical RGB views of a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=448)
    p.add_argument("--focal", type=float, default=500.0)
    p.set_defaults(func=cmd_render_views)

    p = sub.add_parser("probe", parents=[common],
                       help="report which backends have checkpoints")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("serve", parents=[common],
                       help="serve the provider protocol on stdio")
    p.add_argument("--dgcnn-checkpoint", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
