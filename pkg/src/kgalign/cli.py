"""Command line entry point: ``kgalign <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import features as fp
from .graph import GraphParseError, KnowledgeGraph, build_graph, read_annotations
from .trainer import ConfigError, CoverageError, FeatureSet, TrainConfig, train

log = logging.getLogger("kgalign")


def _feature_set(path: str, frames: str | None) -> FeatureSet:
    return FeatureSet(fp.load_embeddings(path), fp.load_frames(frames) if frames else None)


# ------------------------------------------------------------------ commands


def cmd_build_graph(args) -> int:
    g = build_graph(read_annotations(args.annotations), args.min_count, args.train_ratio, args.seed)
    g.save(args.out)
    counts = {r: len(g.by_relation(r)) for r in ("v-a", "b-v", "b-a")}
    n_test = sum(s == "test" for s in g.splits.values())
    print(f"{len(g.entities)} entities, {len(g.triples)} triples {counts}, {n_test} test videos -> {args.out}")
    return 0


def cmd_features_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = fp.synth_dataset(
        args.actions, args.movements, args.videos, args.dim, args.sigma, args.seed, train_ratio=args.train_ratio,
    )
    ds.graph.save(out / "graph.jsonl")
    fp.save_embeddings(out / "features.kgce", ds.table)
    fp.save_frames(out / "frames.kgce", ds.frames)
    with open(out / "annotations.jsonl", "w", encoding="utf-8") as f:
        for rec in ds.annotations:
            f.write(json.dumps(rec) + "\n")
    print(f"synthetic dataset in {out} (nearest-prototype Top-1 {ds.oracle_top1:.4f})")
    return 0


def cmd_features_import(args) -> int:
    g = KnowledgeGraph.load(args.graph)
    if args.toy_dim:
        table = fp.toy_table(g.entities, args.toy_dim, args.seed)
    else:
        source = fp.load_embeddings(args.embeddings, args.manifest)
        missing = source.missing(g.entities)
        if missing:
            raise fp.FeatureFormatError("no embedding for: " + ", ".join(map(str, missing)))
        table = fp.EmbeddingTable(list(g.entities), [source[e] for e in g.entities])
    fp.save_embeddings(args.out, table)
    print(f"{len(table.ids)} x {table.dim} embeddings -> {args.out}")
    return 0


def cmd_train(args) -> int:
    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    cfg = TrainConfig.from_text(text, args.set or [])
    g = KnowledgeGraph.load(args.graph)
    trainer = train(g, _feature_set(args.features, args.frames), cfg, args.out)
    (Path(args.out) / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    last = trainer.metrics[-1] if trainer.metrics else None
    if last:
        print(f"trained {cfg.epochs} epochs: loss {last.loss:.4f}, held-out Top-1 {last.top1:.4f}, Top-5 {last.top5:.4f}")
    print(f"checkpoints and metrics in {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .inference import evaluate_checkpoint

    g = KnowledgeGraph.load(args.graph)
    result = evaluate_checkpoint(args.checkpoint, g, _feature_set(args.features, args.frames), args.split)
    out = Path(args.scores) if args.scores else Path(args.checkpoint).with_name(f"scores_{args.split}.tsv")
    out.write_text(result.tsv(), encoding="utf-8")
    print(result.report)
    print(f"per-video scores -> {out}")
    return 0


def cmd_infer(args) -> int:
    from .inference import infer

    ranked = infer(args.checkpoint, _feature_set(args.features, args.frames), [args.video], args.top)
    for rank, (action, score) in enumerate(ranked[args.video], 1):
        print(f"{rank}\t{action}\t{score:.6f}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kgalign", description="Knowledge-graph aligned action recognition")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-graph", help="build the knowledge graph from annotation lines")
    b.add_argument("--annotations", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--min-count", type=int, default=1)
    b.add_argument("--train-ratio", type=float, default=0.8)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_build_graph)

    f = sub.add_parser("features", help="create or import entity embeddings")
    fsub = f.add_subparsers(dest="features_command", required=True)
    s = fsub.add_parser("synth", help="write a synthetic graph, embeddings and frames")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--actions", type=int, default=8)
    s.add_argument("--movements", type=int, default=32)
    s.add_argument("--videos", type=int, default=400)
    s.add_argument("--dim", type=int, default=32)
    s.add_argument("--sigma", type=float, default=0.3)
    s.add_argument("--train-ratio", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_features_synth)
    i = fsub.add_parser("import", help="align external embeddings (or toy vectors) to a graph")
    i.add_argument("--graph", required=True)
    i.add_argument("--out", required=True)
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--embeddings", help="KGCE file with a manifest sidecar")
    src.add_argument("--toy-dim", type=int, help="generate hash-seeded toy vectors of this width")
    i.add_argument("--manifest", help="manifest path if not <embeddings>.manifest")
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_features_import)

    t = sub.add_parser("train", help="train and write checkpoints plus metrics.tsv")
    t.add_argument("--graph", required=True)
    t.add_argument("--features", required=True)
    t.add_argument("--frames", help="frame features (needed for train_frames = true)")
    t.add_argument("--config", help="key = value file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Top-1/Top-5 of a checkpoint on a graph split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--graph", required=True)
    e.add_argument("--features", required=True)
    e.add_argument("--frames")
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--scores", help="per-video TSV path (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    n = sub.add_parser("infer", help="rank actions for one video")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--features", required=True)
    n.add_argument("--frames")
    n.add_argument("--video", required=True)
    n.add_argument("--top", type=int, default=5)
    n.set_defaults(func=cmd_infer)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (GraphParseError, fp.FeatureFormatError, ConfigError, CoverageError, KeyError, ValueError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"kgalign: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
