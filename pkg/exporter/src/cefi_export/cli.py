"""Command-line wrapper around one export job."""

from __future__ import annotations

import argparse
import sys

from .datasets import FetchError
from .export import ExportJob, run_export


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cefi-export",
        description="Export pooled encoder features to the engine's feature format")
    p.add_argument("--encoder", required=True,
                   help="resnet18 | resnet50 | vit_b_16 | convnext_tiny")
    p.add_argument("--dataset", required=True,
                   help="synthetic:N | folder:PATH | cifar10:train|test")
    p.add_argument("--out", required=True, help="output feature file path")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--device-tag", type=int, default=0)
    p.add_argument("--random-init", action="store_true",
                   help="seeded random weights instead of pretrained (offline)")
    p.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(dataset=args.dataset, encoder=args.encoder,
                    output_path=args.out, batch_size=args.batch,
                    image_size=args.image_size, device_tag=args.device_tag,
                    random_init=args.random_init, seed=args.seed)
    try:
        rows, dim = run_export(job)
    except (FetchError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"wrote {args.out}: {rows} rows x {dim} features ({args.encoder})")
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
