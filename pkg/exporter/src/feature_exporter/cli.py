"""CLI: `feature-exporter export --backbone resnet50 --images DIR --out DIR`."""

from __future__ import annotations

import argparse
import sys

from .backbones import BACKBONES
from .export import export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feature-exporter",
        description="export CNN backbone features into SCCF feature files")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="export features for a directory of images")
    p.add_argument("--backbone", required=True, choices=BACKBONES)
    p.add_argument("--images", required=True, help="directory of 256x256 images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--weights", default="auto",
                   help="'auto' (pretrained if available), 'none' (seeded "
                        "random), or a state-dict path")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    manifest = export(args.images, args.backbone, args.out,
                      weights=args.weights, seed=args.seed)
    print(f"wrote manifest {manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
