#!/usr/bin/env python3
"""
BagRank - late-interaction image/text retrieval with bag-wise MaxSim.

Command-line entry point. Every subcommand reads and writes flat files;
library errors end the process with one ``ERROR <code>: <message>`` line
on stderr and exit status 1.
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from bagging import BaggingHelper, build_helper, load_vocabulary, segment
from bench import bench_run, compare_modes
from config import RECALL_KS, BagRankConfig, BenchConfig, TrainConfig
from contrastive import BaggingPlacement, encode_pairs, train_heads
from embedding_core import ProjectionHead
from errors import BagRankError, FormatError, UnknownItemError
from formats import read_embedding_file, write_embedding_file, write_heatmap, write_loss_csv, write_matrix_csv
from retrieval import (
    build_index,
    evaluate,
    load_qrels,
    load_results,
    rerank,
    save_qrels,
    save_results,
    search,
    two_stage_search,
)
from similarity import Direction, ScoringMode, heatmap, score_batch
from synthetic import load_corpus, write_synthetic

logger = logging.getLogger("bagrank")

MODES = [m.value for m in ScoringMode]
DIRECTIONS = [d.value for d in Direction]


def _read_token_lines(path: str) -> List[List[int]]:
    sequences = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                sequences.append([int(tok) for tok in text.split()])
            except ValueError:
                raise FormatError(f"{path}:{line_no}: expected integer token ids, got {text!r}")
    return sequences


def _pick(items, item_id: Optional[str], path: str):
    if not items:
        raise FormatError(f"{path}: file holds no items")
    if item_id is None:
        return items[0]
    for item in items:
        if item.item_id == item_id:
            return item
    raise UnknownItemError(f"{path}: no item {item_id!r}")


def _parse_grid(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise FormatError(f"grid must look like HxW, got {text!r}")


def _write_json(payload, path: Optional[str]) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    else:
        print(text)


# ---------------------------
# Subcommands
# ---------------------------
def cmd_build_helper(args, config: BagRankConfig) -> None:
    helper = build_helper(load_vocabulary(args.vocab))
    helper.save(args.out)
    print(f"Helper written: {args.out} ({helper.vocab_size} entries, max depth {helper.max_depth})")


def cmd_bag(args, config: BagRankConfig) -> None:
    helper = BaggingHelper.load(args.helper)
    for tokens in _read_token_lines(args.tokens):
        seg = segment(tokens, helper)
        print(json.dumps({"offsets": list(seg.offsets), "bags": seg.bag_tokens(tokens)}))


def cmd_score(args, config: BagRankConfig) -> None:
    queries = read_embedding_file(args.queries)
    cands = read_embedding_file(args.cands)
    matrix = score_batch(queries, cands, ScoringMode(args.mode), Direction(args.direction),
                         workers=config.threads)
    write_matrix_csv(args.out, matrix)
    print(f"Scores written: {args.out} ({matrix.queries}x{matrix.candidates}, {args.mode})")


def cmd_search(args, config: BagRankConfig) -> None:
    """Global search, or shortlist then re-rank for the late-interaction modes."""
    index = build_index(read_embedding_file(args.index))
    mode = ScoringMode(args.mode)
    results = []
    for query in read_embedding_file(args.queries):
        if mode is ScoringMode.GLOBAL:
            results.append(search(index, query, mode, top_k=args.top_k))
        else:
            results.append(two_stage_search(index, query, mode, Direction(args.direction),
                                            depth=config.rerank_depth, top_k=args.top_k))
    save_results(results, args.out)
    print(f"Results written: {args.out} ({len(results)} queries, {mode.value})")


def cmd_rerank(args, config: BagRankConfig) -> None:
    """Re-score saved rankings against the index."""
    index = build_index(read_embedding_file(args.index))
    queries = {item.item_id: item for item in read_embedding_file(args.queries)}
    reranked = []
    for ranking in load_results(args.results):
        if ranking.query_id not in queries:
            raise UnknownItemError(f"{args.queries}: no query {ranking.query_id!r}")
        reranked.append(rerank(index, queries[ranking.query_id], ranking,
                               ScoringMode(args.mode), Direction(args.direction)))
    save_results(reranked, args.out)
    print(f"Reranked results written: {args.out} ({len(reranked)} queries, {args.mode})")


def cmd_eval(args, config: BagRankConfig) -> None:
    report = evaluate(load_results(args.results), load_qrels(args.qrels), ks=tuple(args.ks))
    _write_json(report.as_dict(), args.out)


def cmd_train(args, config: BagRankConfig) -> None:
    samples, encoder, _ = load_corpus(args.pairs)
    train_config = TrainConfig(
        dim=args.dim or config.dim,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        tau_lr=args.tau_lr,
        lambda_bwc=args.lambda_bwc,
        separate_tau=args.separate_tau,
        bwc_direction=args.bwc_direction,
        renormalize_bags=config.renormalize_bags,
        placement=args.placement,
        seed=args.seed,
    )
    result = train_heads(samples, encoder, train_config)
    os.makedirs(args.out_dir, exist_ok=True)
    np.save(os.path.join(args.out_dir, "head_v.npy"), result.head_v.weight)
    np.save(os.path.join(args.out_dir, "head_t.npy"), result.head_t.weight)
    write_loss_csv(os.path.join(args.out_dir, "loss.csv"), result.curve)
    summary = {
        "pairs": len(samples),
        "epochs": train_config.epochs,
        "lambda_bwc": train_config.lambda_bwc,
        "placement": train_config.placement,
        "tau": result.tau.tau,
        "tau_bwc": result.tau_bwc.tau if result.tau_bwc else None,
        "final_l_itc": result.curve[-1].l_itc if result.curve else None,
        "final_l_bwc": result.curve[-1].l_bwc if result.curve else None,
    }
    _write_json(summary, os.path.join(args.out_dir, "train.json"))
    print(f"Heads written to {args.out_dir} (tau={result.tau.tau:.4f})")


def _load_head(path: str) -> ProjectionHead:
    try:
        return ProjectionHead(np.load(path, allow_pickle=False))
    except ValueError as e:
        raise FormatError(f"{path}: not a head matrix ({e})")


def cmd_encode(args, config: BagRankConfig) -> None:
    samples, encoder, _ = load_corpus(args.pairs)
    head_v = _load_head(os.path.join(args.heads, "head_v.npy"))
    head_t = _load_head(os.path.join(args.heads, "head_t.npy"))
    images, texts = encode_pairs(samples, encoder, head_v, head_t,
                                 BaggingPlacement(args.placement), config.renormalize_bags)
    os.makedirs(args.out_dir, exist_ok=True)
    write_embedding_file(os.path.join(args.out_dir, "images.bagf"), images)
    write_embedding_file(os.path.join(args.out_dir, "texts.bagf"), texts)
    save_qrels({s.pair_id: [s.pair_id] for s in samples}, os.path.join(args.out_dir, "qrels.jsonl"))
    print(f"Encoded {len(samples)} pairs into {args.out_dir}")


def cmd_heatmap(args, config: BagRankConfig) -> None:
    image = _pick(read_embedding_file(args.image), args.image_id, args.image)
    text = _pick(read_embedding_file(args.text), args.text_id or image.item_id, args.text)
    bags = text.valid_late()
    if not 0 <= args.bag_index < bags.rows:
        raise UnknownItemError(f"text {text.item_id!r} has {bags.rows} bags, no bag {args.bag_index}")
    grid_h, grid_w = _parse_grid(args.grid)
    heat = heatmap(image.valid_late(), bags.row(args.bag_index), grid_h, grid_w)
    write_heatmap(args.out, heat)
    print(f"Heat map written: {args.out}.pgm, {args.out}.txt")


def cmd_bench(args, config: BagRankConfig) -> None:
    bench_config = BenchConfig(
        n=args.n, k=args.k, dim=args.dim, candidates=args.candidates, queries=args.queries,
        warmup=args.warmup, workers=args.workers or config.threads,
        encoder_layers=args.encoder_layers, encoder_dim=args.encoder_dim, seed=args.seed,
    )
    if args.mode == "compare":
        payload = compare_modes(bench_config)
    else:
        payload = bench_run(ScoringMode(args.mode), bench_config).as_dict()
    _write_json(payload, args.out)


def cmd_gen_synthetic(args, config: BagRankConfig) -> None:
    paths = write_synthetic(args.out_dir, args.pairs, args.seed, dim=args.dim or config.dim,
                            patches=args.patches)
    for role, path in sorted(paths.items()):
        print(f"{role}: {path}")


# ---------------------------
# Argument parsing
# ---------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bagrank",
                                     description="BagRank - bag-wise late-interaction image/text retrieval")
    parser.add_argument("--log-level", help="Logging level (default: BAGF_LOG_LEVEL or WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-helper", help="Compile a vocabulary into a bagging helper")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_helper)

    p = sub.add_parser("bag", help="Print the bag segmentation of token sequences")
    p.add_argument("--tokens", required=True, help="One sequence of token ids per line")
    p.add_argument("--helper", required=True)
    p.set_defaults(func=cmd_bag)

    p = sub.add_parser("score", help="Dense similarity matrix as CSV")
    p.add_argument("--queries", required=True)
    p.add_argument("--cands", required=True)
    p.add_argument("--mode", choices=MODES, default="global")
    p.add_argument("--direction", choices=DIRECTIONS, default="i2t")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("search", help="Top-k search; late modes rerank the global top candidates")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--mode", choices=MODES, default="global")
    p.add_argument("--direction", choices=DIRECTIONS, default="i2t")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("rerank", help="Rescore existing results with a MaxSim kernel")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--results", required=True)
    p.add_argument("--mode", choices=["tokenwise", "bagwise"], default="bagwise")
    p.add_argument("--direction", choices=DIRECTIONS, default="i2t")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("eval", help="Recall@K and MR of results against qrels")
    p.add_argument("--results", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--ks", type=int, nargs="+", default=list(RECALL_KS))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", help="Train the projection heads on a synthetic corpus")
    p.add_argument("--pairs", required=True, help="corpus.json written by gen-synthetic")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lambda", dest="lambda_bwc", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--tau-lr", type=float, default=1e-4)
    p.add_argument("--separate-tau", action="store_true")
    p.add_argument("--bwc-direction", choices=["i2t", "symmetric"], default="i2t")
    p.add_argument("--placement", choices=["early", "late"], default="late")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="Encode a corpus into joint-space embedding files")
    p.add_argument("--pairs", required=True)
    p.add_argument("--heads", required=True, help="Directory holding head_v.npy and head_t.npy")
    p.add_argument("--placement", choices=["early", "late"], default="late")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("heatmap", help="Patch activation map of one text bag")
    p.add_argument("--image", required=True)
    p.add_argument("--image-id")
    p.add_argument("--text", required=True)
    p.add_argument("--text-id")
    p.add_argument("--bag-index", type=int, required=True)
    p.add_argument("--grid", required=True, help="Patch grid as HxW")
    p.add_argument("--out", required=True, help="Output prefix")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("bench", help="Re-ranking latency/throughput benchmark")
    p.add_argument("--mode", choices=MODES + ["compare"], default="compare")
    p.add_argument("--n", type=int, default=196)
    p.add_argument("--k", type=int, default=32)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--candidates", type=int, default=64)
    p.add_argument("--queries", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--workers", type=int)
    p.add_argument("--encoder-layers", type=int, default=0,
                   help="Frozen mixer layers run per query before scoring (0 = scoring only)")
    p.add_argument("--encoder-dim", type=int, default=384)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-synthetic", help="Write a planted synthetic corpus")
    p.add_argument("--pairs", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int)
    p.add_argument("--patches", type=int, default=16)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = BagRankConfig()
        if args.log_level:
            config.log_level = args.log_level
        logging.basicConfig(level=config.log_level.upper(),
                            format="%(asctime)s %(name)s %(levelname)s %(message)s")
        args.func(args, config)
        return 0
    except BagRankError as e:
        print(e.one_line(), file=sys.stderr)
        return 1
    except OSError as e:
        print(f"ERROR IO: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"ERROR Internal: {' '.join(str(e).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
