"""Operator command line: offline indexing, ad-hoc search, batch
evaluation, serving, and index inspection.

Exit codes: 0 success, 2 user/data error, 3 backend failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .backends import CallPolicy, HttpGrounder, HttpRelevanceScorer, HttpTextEmbedder
from .errors import BackendCallError, BackendUnavailableError, MatirError
from .evaluation import run_evaluation, score_dumped_results
from .index import build_index, index_stats, load_index, save_index
from .metrics import dump_results, load_ground_truth, load_results
from .pipeline import MODE_FULL, MODE_RERANK_ONLY, MODE_STAGE1, MODES, result_rows, run_pipeline
from .search import SearchParams, ensemble_query
from .service import ServiceConfig, serve

log = logging.getLogger("matir.cli")


def _print_stats(stats) -> None:
    print(f"images:        {stats.image_count}")
    print(f"regions:       {stats.total_regions}")
    print(f"regions/image: min {stats.min_regions}  mean {stats.mean_regions:.2f}  "
          f"max {stats.max_regions}")
    print(f"dimension:     {stats.dimension}")


def cmd_build_index(args) -> int:
    index = build_index(args.manifest, args.embeddings, args.dim)
    save_index(index, args.out)
    print(f"wrote {args.out}")
    _print_stats(index_stats(index))
    return 0


def _load_query_rows(path: str, dimension: int) -> list[np.ndarray]:
    data = np.fromfile(path, dtype="<f4")
    if data.size == 0 or data.size % dimension != 0:
        raise MatirError(
            f"query embedding file holds {data.size} floats, not a positive multiple "
            f"of dimension {dimension}")
    return [row.astype(np.float64) for row in data.reshape(-1, dimension)]


def cmd_search(args) -> int:
    params = SearchParams(n_c=args.nc, n_k=args.nk)
    index = load_index(args.index)
    rows = _load_query_rows(args.query_embedding, index.dimension)
    query = ensemble_query(rows)

    if args.grounder and not args.scorer:
        raise MatirError("--grounder requires --scorer (no grounding-only mode)")
    if (args.scorer or args.grounder) and not args.query_text:
        raise MatirError("--query-text is required when backend URLs are given")
    scorer = HttpRelevanceScorer(args.scorer, timeout_s=args.timeout) if args.scorer else None
    grounder = HttpGrounder(args.grounder, timeout_s=args.timeout) if args.grounder else None
    if scorer and grounder:
        mode = MODE_FULL
    elif scorer:
        mode = MODE_RERANK_ONLY
    else:
        mode = MODE_STAGE1

    policy = CallPolicy(timeout_s=args.timeout, retries=args.retries)
    result = run_pipeline(index, query, mode, params, query_text=args.query_text,
                          scorer=scorer, grounder=grounder, policy=policy,
                          workers=args.workers, outage_policy="error")
    rows_out = result_rows(result, index)
    if args.json:
        print(json.dumps({"mode": mode, "results": rows_out}, indent=2))
        return 0
    print(f"{'rank':>4}  {'image_id':<24} {'relevance':>9}  {'stage1':>8}  "
          f"{'iou':>5}  source")
    for rank, row in enumerate(rows_out, start=1):
        relevance = "-" if row["relevance"] is None else f"{row['relevance']:.4f}"
        iou = "-" if row["matched_iou"] is None else f"{row['matched_iou']:.3f}"
        print(f"{rank:>4}  {row['image_id']:<24} {relevance:>9}  "
              f"{row['stage1_score']:>8.4f}  {iou:>5}  {row['source']}")
    return 0


def _load_queries_file(path) -> dict[str, str]:
    queries: dict[str, str] = {}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
            query_id, text = obj["query_id"], obj["text"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise MatirError(f"queries line {line_no}: {exc}") from exc
        if query_id in queries:
            raise MatirError(f"queries line {line_no}: duplicate query_id {query_id}")
        queries[query_id] = text
    return queries


def cmd_evaluate(args) -> int:
    index = load_index(args.index)
    gts = load_ground_truth(args.gt, index=index)

    if args.results:
        rankings = load_results(args.results)
        report = score_dumped_results(rankings, gts)
    else:
        if not args.embedder:
            raise MatirError("--embedder URL is required unless scoring --results")
        if args.mode in (MODE_FULL, MODE_RERANK_ONLY) and not args.scorer:
            raise MatirError(f"mode {args.mode} requires --scorer")
        if args.mode == MODE_FULL and not args.grounder:
            raise MatirError(f"mode {args.mode} requires --grounder")
        policy = CallPolicy(max_in_flight=args.max_in_flight, timeout_s=args.timeout,
                            retries=args.retries)
        embedder = HttpTextEmbedder(args.embedder, timeout_s=args.timeout)
        scorer = HttpRelevanceScorer(args.scorer, timeout_s=args.timeout) if args.scorer else None
        grounder = HttpGrounder(args.grounder, timeout_s=args.timeout) if args.grounder else None
        queries = _load_queries_file(args.queries) if args.queries else None
        params = SearchParams(n_c=args.nc, n_k=args.nk)
        report, rankings = run_evaluation(
            index, gts, embedder, scorer=scorer, grounder=grounder, mode=args.mode,
            params=params, policy=policy, workers=args.workers, queries=queries)
        if args.dump:
            dump_results(rankings, args.dump)
            print(f"dumped per-query results to {args.dump}")

    Path(args.out).write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    print(f"mAP@50:    {report.map50:.6f}")
    print(f"mAP@50@50: {report.map50_50:.6f}")
    print(f"queries evaluated: {len(report.per_query)}  excluded: {len(report.excluded_queries)}")
    if report.fallback_grounded is not None:
        print(f"fallback-grounded results: {report.fallback_grounded}")
    if report.failed_scored is not None:
        print(f"failed scorer calls: {report.failed_scored}")
    print(f"wrote {args.out}")
    return 0


def cmd_serve(args) -> int:
    overrides = {
        "index_path": args.index,
        "listen_address": args.listen,
        "text_embedder_url": args.embedder,
        "scorer_url": args.scorer,
        "grounder_url": args.grounder,
    }
    config = ServiceConfig.from_file(args.config, overrides=overrides)
    serve(config)
    return 0


def cmd_inspect(args) -> int:
    index = load_index(args.index)
    if args.image is None:
        _print_stats(index_stats(index))
        return 0
    entry = index.entry(args.image)
    print(f"image {entry.image_id}  {entry.width}x{entry.height}  uri={entry.uri or '-'}")
    print(f"{'mask_id':>7}  {'bbox (x,y,w,h)':<24} {'area':>7}  {'fg pixels':>9}")
    for region in entry.regions:
        b = region.bbox
        bbox = f"({b.x:.0f},{b.y:.0f},{b.w:.0f},{b.h:.0f})"
        print(f"{region.mask_id:>7}  {bbox:<24} {b.area:>7.0f}  {region.mask.foreground_count:>9}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matir",
        description="Mask-aware text-to-image retrieval engine.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-index", help="build an index from manifest + embedding blob")
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_build_index)

    p = sub.add_parser("search", help="rank the gallery for a query embedding file")
    p.add_argument("--index", required=True)
    p.add_argument("--query-embedding", required=True,
                   help="little-endian float32 file, one or more rows of d floats")
    p.add_argument("--query-text", help="object description sent to scorer/grounder backends")
    p.add_argument("--nc", type=int, default=100)
    p.add_argument("--nk", type=int, default=50)
    p.add_argument("--scorer", help="relevance scorer base URL")
    p.add_argument("--grounder", help="grounder base URL")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("evaluate", help="run queries against ground truth and report mAP")
    p.add_argument("--index", required=True)
    p.add_argument("--gt", required=True, help="ground truth JSONL")
    p.add_argument("--queries", help="optional queries JSONL (query_id, text); default: all GT queries")
    p.add_argument("--embedder", help="text embedder base URL")
    p.add_argument("--scorer", help="relevance scorer base URL")
    p.add_argument("--grounder", help="grounder base URL")
    p.add_argument("--results", help="score this pre-dumped results JSONL instead of running")
    p.add_argument("--dump", help="write per-query results JSONL here")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--mode", choices=list(MODES), default=MODE_FULL)
    p.add_argument("--nc", type=int, default=100)
    p.add_argument("--nk", type=int, default=50)
    p.add_argument("--max-in-flight", type=int, default=8)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("serve", help="run the HTTP retrieval service")
    p.add_argument("--config", help="service config JSON")
    p.add_argument("--index", help="index file (overrides config)")
    p.add_argument("--listen", help="host:port (overrides config)")
    p.add_argument("--embedder", help="text embedder base URL")
    p.add_argument("--scorer", help="relevance scorer base URL")
    p.add_argument("--grounder", help="grounder base URL")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("inspect", help="print index stats or one image's regions")
    p.add_argument("--index", required=True)
    p.add_argument("--image", help="image_id to list regions for")
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (BackendUnavailableError, BackendCallError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except MatirError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
