"""Command line for extraction, ground-truth conversion, and serving."""

from __future__ import annotations

import argparse
import logging
import sys
import time

from .config import ExtractionConfig
from .extract import extract_gallery
from .groundtruth import convert_groundtruth
from .servers import serve_all, serve_embedder, serve_grounder, serve_scorer


def cmd_extract(args) -> int:
    config = ExtractionConfig.from_file(args.config)
    counts = extract_gallery(args.images, config, args.manifest, args.embeddings,
                             engine=args.engine, cropping=args.cropping)
    print(f"images: {counts['images']} (skipped {counts['skipped']}, "
          f"empty {counts['empty_images']}), regions: {counts['regions']}")
    print(f"wrote {args.manifest} and {args.embeddings}")
    return 0


def cmd_convert_gt(args) -> int:
    counts = convert_groundtruth(args.annotations, args.out, flavor=args.flavor)
    print(f"queries: {counts['queries']} ({counts['queries_with_relevant']} with relevant images)")
    print(f"wrote {args.out}")
    return 0


def cmd_serve(args) -> int:
    config = ExtractionConfig.from_file(args.config)
    servers = {
        "embedder": serve_embedder,
        "scorer": serve_scorer,
        "grounder": serve_grounder,
        "all": serve_all,
    }
    server = servers[args.role](config, port=args.port, host=args.host, engine=args.engine)
    print(f"{args.role} listening on {server.url}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.stop()
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matir-adapters",
        description="Model adapters for the matir retrieval engine.")
    parser.add_argument("--engine", choices=["synthetic", "hf"], default="synthetic",
                        help="model stack: deterministic synthetic engines or real models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract a gallery into manifest + embedding blob")
    p.add_argument("--images", required=True, help="directory of gallery images")
    p.add_argument("--config", required=True, help="ExtractionConfig JSON")
    p.add_argument("--manifest", required=True, help="output manifest JSONL path")
    p.add_argument("--embeddings", required=True, help="output float32 blob path")
    p.add_argument("--cropping", action="store_true",
                   help="crop-and-encode region embeddings instead of mask-conditioned ones")
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("convert-gt", help="convert dataset annotations to engine ground truth")
    p.add_argument("--annotations", required=True)
    p.add_argument("--flavor", choices=["coco", "descriptions"], default="coco")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_convert_gt)

    p = sub.add_parser("serve", help="serve one of the backend protocols")
    p.add_argument("--role", choices=["embedder", "scorer", "grounder", "all"], required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
