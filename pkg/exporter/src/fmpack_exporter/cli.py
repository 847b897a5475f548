"""fmpack-export command line."""

from __future__ import annotations

import argparse
import sys

from . import __version__
from .export import ExportSpec, export_pack, read_labels_csv, verify_pack


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fmpack-export",
        description="extract multi-block feature maps into an FMPack directory")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command")

    p = parser  # default command is export; verify is a subcommand
    p.add_argument("--backbone", help="registry name, e.g. resnet50")
    p.add_argument("--blocks", default="-2,-1",
                   help="comma-separated block ids (negative from the end)")
    p.add_argument("--resolution", type=int, default=224, choices=(84, 224))
    p.add_argument("--images", help="directory containing the image files")
    p.add_argument("--labels", help="csv of filename,label rows")
    p.add_argument("--weights", default="default",
                   help="'default' (pretrained), 'none' (random), or a path")
    p.add_argument("--augment", action="store_true")
    p.add_argument("--threshold", type=int, default=15)
    p.add_argument("--randaugment-ops", type=int, default=2)
    p.add_argument("--randaugment-magnitude", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    v = sub.add_parser("verify", help="re-read a pack and report violations")
    v.add_argument("path")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "verify":
            problems = verify_pack(args.path)
            for p in problems:
                print(f"violation: {p}")
            print("clean" if not problems else f"{len(problems)} violation(s)")
            return 0 if not problems else 1
        for required in ("backbone", "images", "labels", "out"):
            if getattr(args, required) in (None, ""):
                parser.error(f"--{required} is required for export")
        spec = ExportSpec(
            backbone=args.backbone,
            blocks=[int(b) for b in args.blocks.split(",")],
            resolution=args.resolution,
            images=read_labels_csv(args.images, args.labels),
            weights=args.weights,
            augment=args.augment,
            threshold=args.threshold,
            randaugment_ops=args.randaugment_ops,
            randaugment_magnitude=args.randaugment_magnitude,
            seed=args.seed,
        )
        manifest = export_pack(spec, args.out)
        shapes = ", ".join(f"{bid}: {h}x{w}x{c}"
                           for bid, h, w, c in manifest["blocks"])
        print(f"exported {len(manifest['records'])} records ({shapes}) "
              f"to {args.out}")
        return 0
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
