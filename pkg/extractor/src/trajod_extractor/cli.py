"""CLI: export per-layer features of a pretrained classifier to an FTX file.

    trajod-extract --model resnet18 --nodes nodes.txt --data ./imagenet \
                   --split val --out val.ftx [--raw]
"""

from __future__ import annotations

import argparse
import sys

from .extraction import ExtractionSpec, extract


def read_node_file(path: str) -> list[str]:
    nodes = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                nodes.append(line)
    return nodes


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajod-extract", description=__doc__)
    p.add_argument("--model", required=True, help="torchvision model id, e.g. resnet18")
    p.add_argument("--nodes", required=True, help="file with one graph node name per line")
    p.add_argument("--data", required=True, help="ImageFolder root directory")
    p.add_argument("--split", default="", help="subdirectory of --data to read")
    p.add_argument("--out", required=True, help="output FTX path")
    p.add_argument("--raw", action="store_true", help="store unpooled feature maps")
    p.add_argument("--weights", default="DEFAULT", help="weights tag or 'none'")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--device", default="cpu")
    p.add_argument("--limit", type=int, help="stop after this many samples")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = ExtractionSpec(
            model=args.model,
            nodes=read_node_file(args.nodes),
            data=args.data,
            split=args.split,
            out=args.out,
            weights=args.weights,
            batch_size=args.batch_size,
            device=args.device,
            raw=args.raw,
            limit=args.limit,
        )
        manifest = extract(spec)
    except OSError as exc:
        print(f"trajod-extract: cannot read/write: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"trajod-extract: {exc}", file=sys.stderr)
        return 1
    print(args.out)
    print(f"{args.out}.manifest.json")
    print(f"sha256 {manifest['sha256']}")
    return 0


def entrypoint() -> None:
    sys.exit(main())
