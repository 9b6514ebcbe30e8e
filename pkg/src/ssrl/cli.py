"""Command-line front end: ``ssrl <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import RunConfig, echo_config, hyper_dict, parse_config
from .errors import ConfigError, DataError, InternalError
from .evaluate import beam_search, decode_paths, evaluate, known_answer_table
from .kg import (DEFAULT_MAX_ACTIONS, KnowledgeGraph, MaskedView, Query, compute_stats,
                 ingest_triples, load_queries)
from .labels import generate_label_cache, label_coverage, load_labels, save_labels
from .policy import config_hash, load_checkpoint
from .synthetic import KINDS, make_synthetic
from .trainer import LOG_COLUMNS, TrainLog, sweep, train, write_heatmap

log = logging.getLogger("ssrl")

CURVE_COLUMNS = ("stage", "batch", "value")
CURVE_METRICS = tuple(c for c in LOG_COLUMNS if c not in ("stage", "batch"))


# -- dataset plumbing -------------------------------------------------------

class Dataset:
    def __init__(self, cfg: RunConfig):
        gpath = cfg.resolve_file("graph")
        if gpath is None:
            raise ConfigError("no dataset given (use --graph or data.dir)")
        if not gpath.exists():
            raise ConfigError(f"graph file not found: {gpath}")
        self.graph: KnowledgeGraph = ingest_triples(gpath, max_actions=cfg.max_actions)
        self.splits: dict[str, np.ndarray] = {}
        for split in ("train", "dev", "test"):
            p = cfg.resolve_file(split)
            if p is not None and p.exists():
                self.splits[split] = load_queries(p, self.graph, skip_unknown=True)
        if "train" not in self.splits:
            raise ConfigError("training queries not found (expected train.txt)")

    def split(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise ConfigError(f"split {name!r} not available")
        return self.splits[name]

    def known(self):
        return known_answer_table(self.graph, *self.splits.values())


def _graph_cfg(args) -> RunConfig:
    cfg = RunConfig()
    cfg.data_dir = args.graph
    if getattr(args, "max_actions", None):
        cfg.max_actions = args.max_actions
    return cfg


def write_json(obj, path: str | Path | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n", encoding="utf-8")


def emit_curves(train_log: TrainLog, out_dir: str | Path) -> list[Path]:
    """One ``stage,batch,value`` CSV per logged metric; rows without a value are skipped."""
    if len(train_log) == 0:
        raise ConfigError("training log is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for metric in CURVE_METRICS:
        p = out / f"curve_{metric}.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_COLUMNS)
            for row in train_log.rows:
                if row[metric] is not None:
                    w.writerow([row["stage"], row["batch"], repr(float(row[metric]))])
        paths.append(p)
    return paths


# -- subcommands ------------------------------------------------------------

def cmd_stats(args) -> int:
    graph = ingest_triples(_graph_cfg(args).resolve_file("graph"),
                           max_actions=args.max_actions or DEFAULT_MAX_ACTIONS)
    queries = load_queries(args.queries, graph, skip_unknown=True) if args.queries else None
    stats = compute_stats(graph, queries, args.k)
    write_json(stats.to_json(graph.vocab), args.out)
    return 0


def cmd_gen_labels(args) -> int:
    ds = Dataset(_graph_cfg(args))
    rel = None
    if args.relations:
        rel = [ds.graph.vocab.relation_id(r.strip()) for r in args.relations.split(",") if r.strip()]
    queries = ds.split("train")
    cache, skipped = generate_label_cache(ds.graph, queries, args.depth, args.mask_answers,
                                          args.limit, rel)
    save_labels(cache.values(), args.out)
    cov = label_coverage(cache, queries)
    log.info("labelled %d queries, %d skipped, coverage %.4f", len(cache), skipped, cov.overall)
    print(json.dumps({"labelled": len(cache), "skipped": skipped, "coverage": cov.overall}))
    return 0


def _run_config(args) -> RunConfig:
    cfg = parse_config(args.config, args.set or ())
    if args.graph:
        cfg.data_dir = args.graph
    if args.labels:
        cfg.label_cache = args.labels
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.hyper.seed = args.seed
    cfg.validate(require_data=True)
    if cfg.out_dir is None:
        raise ConfigError("an output directory is required (--out or out = ...)")
    return cfg


def _labels_for(cfg: RunConfig, ds: Dataset, needed: bool):
    hp = cfg.hyper
    if not needed:
        return None
    if cfg.label_cache:
        return load_labels(cfg.label_cache)
    cache, skipped = generate_label_cache(ds.graph, ds.split("train"), hp.depth, hp.mask_answers)
    log.info("generated labels for %d queries (%d unlabelable)", len(cache), skipped)
    return cache


def cmd_train(args) -> int:
    cfg = _run_config(args)
    ds = Dataset(cfg)
    out = Path(cfg.out_dir)
    echo_config(cfg, out)
    # thread count changes nothing numerically, so it stays out of the hash
    hashed = {k: v for k, v in hyper_dict(cfg).items() if k != "threads"}
    meta = {"config_hash": config_hash(hashed), "horizon": cfg.hyper.horizon,
            "max_actions": cfg.max_actions}
    dev = ds.splits.get("dev")
    labels = _labels_for(cfg, ds, cfg.hyper.sl_epochs > 0)
    result = train(ds.graph, ds.split("train"), cfg.hyper, labels, dev, ds.known(),
                   checkpoint_dir=out, metadata=meta)
    result.log.write_csv(out / "train_log.csv")
    emit_curves(result.log, out)
    log.info("wrote %s", out)
    return 0


def _load_for_eval(args):
    cfg = _graph_cfg(args)
    params, meta = load_checkpoint(args.checkpoint)
    cfg.max_actions = args.max_actions or meta.get("max_actions", cfg.max_actions)
    ds = Dataset(cfg)
    if (params.n_entities, params.n_relations) != (ds.graph.n_entities, ds.graph.n_relations):
        raise DataError("checkpoint vocabulary does not match the graph")
    horizon = args.horizon or meta.get("horizon", 3)
    return ds, params, horizon


def cmd_eval(args) -> int:
    ds, params, horizon = _load_for_eval(args)
    report = evaluate(ds.graph, params, ds.split(args.split), horizon, args.beam, ds.known(),
                      filtered=not args.raw)
    write_json(report.to_json(ds.graph.vocab, per_query=args.per_query), args.out)
    return 0


def cmd_paths(args) -> int:
    ds, params, horizon = _load_for_eval(args)
    parts = [p.strip() for p in args.query.split(",")]
    if len(parts) not in (2, 3):
        raise ConfigError("--query must be 'head,relation' or 'head,relation,tail'")
    v = ds.graph.vocab
    src, rel = v.entity_id(parts[0]), v.relation_id(parts[1])
    target = v.entity_id(parts[2]) if len(parts) == 3 else None
    q = Query(src, rel, target if target is not None else src)
    view = ds.graph.query_view(q) if target is not None else MaskedView(ds.graph)
    beams = beam_search(ds.graph, params, q, horizon, args.beam, view=view)
    for line in decode_paths(beams, v, target, args.top):
        print(line)
    return 0


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    try:
        epochs = [int(x) for x in args.epochs.split(",")]
    except ValueError:
        raise ConfigError(f"bad --epochs list {args.epochs!r}") from None
    ds = Dataset(cfg)
    out = Path(cfg.out_dir)
    echo_config(cfg, out)
    cache = _labels_for(cfg, ds, any(epochs))
    rows = sweep(ds.graph, ds.split("train"), ds.split(args.split), cfg.hyper, epochs, cache, ds.known())
    write_heatmap(rows, out / "heatmap.csv")
    return 0


def cmd_make_synthetic(args) -> int:
    kg = make_synthetic(args.kind, args.size, args.seed)
    paths = kg.write(args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssrl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"ssrl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def graph_arg(sp, required=True):
        sp.add_argument("--graph", required=required,
                        help="dataset directory (graph.txt or train.txt, plus dev.txt/test.txt)")
        sp.add_argument("--max-actions", type=int, default=None,
                        help="action-list cap per entity, NO_OP included (default 256)")

    sp = sub.add_parser("stats", help="graph statistics as JSON")
    graph_arg(sp)
    sp.add_argument("--queries", help="query file for the k-hop reachability fraction")
    sp.add_argument("--k", type=int, default=3, help="hop limit for the reachability fraction")
    sp.add_argument("--out", help="write JSON here instead of stdout")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("gen-labels", help="build the label cache for the training queries")
    graph_arg(sp)
    sp.add_argument("--depth", type=int, default=3, help="maximum correct-path length")
    sp.add_argument("--out", required=True, help="label cache file")
    sp.add_argument("--limit", type=int, help="label at most this many queries")
    sp.add_argument("--relations", help="comma-separated relation names")
    sp.add_argument("--mask-answers", action="store_true",
                    help="also hide the source's other answer edges for the query relation")
    sp.set_defaults(func=cmd_gen_labels)

    for name, fn, helptext in (("train", cmd_train, "SL then RL training"),
                               ("sweep", cmd_sweep, "train per SL-epoch count, write heatmap.csv")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--graph", help="dataset directory (sets data.dir)")
        sp.add_argument("--labels", help="label cache file; built in memory when absent")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed (default 42)")
        sp.set_defaults(func=fn)
        if name == "sweep":
            sp.add_argument("--epochs", default="0,1,2", help="comma-separated SL epoch counts, 0 included")
            sp.add_argument("--split", default="test", help="split scored for the heatmap")

    for name, fn in (("eval", cmd_eval), ("paths", cmd_paths)):
        sp = sub.add_parser(name, help="evaluate a checkpoint" if name == "eval" else "decode paths")
        sp.add_argument("--checkpoint", required=True, help="checkpoint written by train")
        graph_arg(sp)
        sp.add_argument("--beam", type=int, default=100, help="beam width")
        sp.add_argument("--horizon", type=int, default=None, help="path length (default from checkpoint)")
        sp.set_defaults(func=fn)
        if name == "eval":
            sp.add_argument("--split", default="test", help="dev or test")
            sp.add_argument("--out", help="write the JSON report here instead of stdout")
            sp.add_argument("--raw", action="store_true", help="unfiltered ranking")
            sp.add_argument("--per-query", action="store_true", help="include per-query ranks")
        else:
            sp.add_argument("--query", required=True, help="'head,relation[,tail]'")
            sp.add_argument("--top", type=int, default=5, help="number of paths to print")

    sp = sub.add_parser("make-synthetic", help="write a generated dataset")
    sp.add_argument("--kind", choices=KINDS, default="composition")
    sp.add_argument("--size", type=int, default=200, help="number of entities")
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_make_synthetic)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    except DataError as exc:
        log.error("%s", exc)
        return 3
    except InternalError as exc:
        log.error("internal error: %s", exc)
        return 4
    except OSError as exc:
        log.error("%s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
