"""Command-line entry point: ``daer <subcommand> [options]``.

Failures print one JSON line ``{"error": kind, "code": n, "message": ...}`` to
stderr and exit with: 2 usage/config, 3 decode, 4 dimension mismatch, 5 other.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from . import config as cfgmod
from .bench import Scenario, alpha_ablation, clustered_dataset, run_benchmark
from .ers import ErsConfig, ErsSearcher, greedy_retrieve, knn_exact
from .errors import ConfigError, DecodeError, ShapeError
from .index import (EMB_MAGIC, IDX_MAGIC, BuildConfig, ItemStore, build_index, decode_embeddings,
                    deserialize_index, load_embeddings, load_index, quantize_unit, save_embeddings,
                    save_index)
from .trainer import CKPT_MAGIC, EXPERIMENTS, TrainConfig, Trainer, decode_checkpoint, experiment_config

log = logging.getLogger("daer")

EXIT_USAGE = 2
EXIT_DECODE = 3
EXIT_DIM = 4
EXIT_OTHER = 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser, seed: bool = True):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override (repeatable)")
    if seed:
        p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output path")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="daer", description="Attention search training and hierarchical retrieval tools.")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write clustered item and query embedding files")
    _common(p)
    p.add_argument("--queries-out", help="query file (default: <out>.queries)")

    p = sub.add_parser("train", help="two-phase training with checkpoints and JSONL metrics")
    _common(p)
    p.add_argument("--experiment", default="full", choices=sorted(EXPERIMENTS))
    p.add_argument("--alpha", type=float)
    p.add_argument("--budget", type=int)
    p.add_argument("--steps", type=int, help="stop after this many steps")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--metrics", help="metrics JSONL (default: <out>.metrics.jsonl)")

    p = sub.add_parser("build-index", help="build a hierarchical index over an embedding file")
    _common(p)
    p.add_argument("--items", required=True)

    p = sub.add_parser("query", help="search an index with knn, greedy or ers")
    _common(p, seed=False)
    p.add_argument("--index", required=True)
    p.add_argument("--items", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--queries", help="embedding file of queries")
    g.add_argument("--query-hex", help="one query as hex of little-endian f32 values")
    p.add_argument("--method", choices=["knn", "greedy", "ers"], default="ers")
    p.add_argument("--k", type=int)
    p.add_argument("--i-max", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda3", type=float)
    p.add_argument("--push-width", type=int)
    p.add_argument("--reexpand", action="store_true", default=None)

    p = sub.add_parser("bench", help="run a retrieval scenario or the alpha ablation grid")
    _common(p)
    p.add_argument("--csv")
    p.add_argument("--ablation", choices=["alpha"], help="train-side grid instead of retrieval")
    p.add_argument("--alphas", default="0,0.25,0.5,0.75,1")
    p.add_argument("--seeds", default="0,1,2,3,4")

    p = sub.add_parser("export-attn", help="write A_initial and A_optimized for one sample as CSV")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--budget", type=int)
    p.add_argument("--alpha", type=float)

    p = sub.add_parser("inspect", help="validate a daer file and print its header")
    p.add_argument("path")
    return ap


def _fail(kind: str, code: int, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "code": code, "message": message}) + "\n")
    return code


def _overrides(args, **flags) -> dict:
    ov = cfgmod.parse_overrides(args.set)
    for k, v in flags.items():
        if v is not None:
            ov[k] = v
    return ov


def _header(command: str, cfg, **extra) -> dict:
    rec = {"header": True, "command": command, "config": cfgmod.to_dict(cfg)}
    rec.update(extra)
    return rec


def _open_out(path: Optional[str]):
    return open(path, "w") if path else sys.stdout


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if not args.out:
        raise ConfigError("--out is required")
    sc = cfgmod.load_config(Scenario, args.config, _overrides(args, seed=args.seed))
    store, queries = clustered_dataset(sc.n_items, sc.dim, sc.n_clusters, sc.n_queries, sc.seed,
                                       sc.item_noise, sc.query_noise)
    save_embeddings(args.out, ItemStore(store.ids, quantize_unit(store.emb)))
    qpath = args.queries_out or args.out + ".queries"
    save_embeddings(qpath, ItemStore(np.arange(len(queries), dtype=np.uint64), quantize_unit(queries)))
    print(json.dumps(_header("gen-data", sc, items=args.out, queries=qpath)))
    return 0


def cmd_train(args) -> int:
    if args.resume:
        tr = Trainer.load(args.resume)
        if args.set or args.config:
            raise ConfigError("--resume takes its config from the checkpoint")
    else:
        cfg = cfgmod.load_config(TrainConfig, args.config,
                                 _overrides(args, seed=args.seed, alpha=args.alpha, budget=args.budget))
        tr = Trainer(experiment_config(cfg, args.experiment), args.experiment)
    out = args.out or "daer.ckpt"
    mpath = args.metrics or out + ".metrics.jsonl"
    mode = "a" if args.resume else "w"
    with open(mpath, mode) as sink:
        sink.write(json.dumps(_header("train", tr.cfg, experiment=tr.experiment, start_step=tr.step)) + "\n")
        recs = tr.run(args.steps, sink)
    tr.save(out)
    ev = tr.evaluate()
    mcts_ms = sum(r["mcts_ms"] for r in recs)
    step_ms = sum(r["step_ms"] for r in recs)
    print(json.dumps({"checkpoint": out, "metrics": mpath, "step": tr.step,
                      "final_loss": recs[-1]["loss"] if recs else None,
                      "mcts_share": mcts_ms / step_ms if step_ms else 0.0, "eval": ev}))
    return 0


def cmd_build_index(args) -> int:
    if not args.out:
        raise ConfigError("--out is required")
    store = load_embeddings(args.items)
    cfg = cfgmod.load_config(BuildConfig, args.config, _overrides(args, seed=args.seed))
    index = build_index(store, cfg)
    save_index(args.out, index)
    print(json.dumps(_header("build-index", cfg, items=len(store), nodes=len(index.nodes),
                             leaves=len(index.leaves), depth=index.depth)))
    return 0


def _parse_hex(s: str) -> np.ndarray:
    try:
        raw = bytes.fromhex(s)
    except ValueError as exc:
        raise DecodeError(f"bad --query-hex: {exc}") from exc
    if len(raw) % 4:
        raise DecodeError("--query-hex length is not a multiple of 4 bytes")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def cmd_query(args) -> int:
    store = load_embeddings(args.items)
    index = load_index(args.index, store)
    cfg = cfgmod.load_config(ErsConfig, args.config, _overrides(
        args, k=args.k, i_max=args.i_max, lambda1=args.lambda1, lambda2=args.lambda2,
        lambda3=args.lambda3, push_width=args.push_width, reexpand=args.reexpand))
    if args.queries:
        queries = load_embeddings(args.queries).emb
    else:
        queries = _parse_hex(args.query_hex)[None, :]
    if queries.shape[1] != index.dim:
        raise ShapeError(f"query dim {queries.shape[1]} does not match index dim {index.dim}")
    searcher = ErsSearcher(index, cfg)
    fh = _open_out(args.out)
    try:
        fh.write(json.dumps(_header("query", cfg, method=args.method)) + "\n")
        for qi, q in enumerate(queries):
            if args.method == "knn":
                cands, scored, visited = knn_exact(q, store, cfg.k), len(store), 0
            else:
                res = greedy_retrieve(q, index, cfg.k) if args.method == "greedy" else searcher.retrieve(q)
                cands, scored, visited = res.candidates, res.items_scored, res.nodes_visited
            for rank, c in enumerate(cands, start=1):
                fh.write(json.dumps({"query_id": qi, "rank": rank, "item_id": c.item_id,
                                     "similarity": c.similarity, "items_scored": scored,
                                     "nodes_visited": visited}) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def _csv_list(s: str, tp):
    try:
        return [tp(x) for x in s.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad list {s!r}") from exc


def cmd_bench(args) -> int:
    fh = _open_out(args.out)
    try:
        if args.ablation == "alpha":
            cfg = cfgmod.load_config(TrainConfig, args.config, _overrides(args, seed=args.seed))
            fh.write(json.dumps(_header("bench", cfg, ablation="alpha")) + "\n")
            alpha_ablation(cfg, _csv_list(args.alphas, float), _csv_list(args.seeds, int), sink=fh)
        else:
            sc = cfgmod.load_config(Scenario, args.config, _overrides(args, seed=args.seed))
            fh.write(json.dumps(_header("bench", sc)) + "\n")
            run_benchmark(sc, sink=fh, csv_path=args.csv)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_export_attn(args) -> int:
    if args.checkpoint:
        tr = Trainer.load(args.checkpoint)
        ov = _overrides(args, budget=args.budget, alpha=args.alpha)
        if ov:
            tr.cfg = cfgmod.build(TrainConfig, {**cfgmod.to_dict(tr.cfg), **ov})
    else:
        cfg = cfgmod.load_config(TrainConfig, args.config,
                                 _overrides(args, seed=args.seed, budget=args.budget, alpha=args.alpha))
        tr = Trainer(cfg)
    a0, a1, res, reward = tr.sample_attention(args.sample)
    prefix = args.out or "attention"
    head = json.dumps(_header("export-attn", tr.cfg, step=tr.step, sample=args.sample,
                              action=res.action.to_json() if res.action else None, reward=reward))
    paths = []
    for name, st in (("initial", a0), ("optimized", a1)):
        path = f"{prefix}_{name}.csv"
        np.savetxt(path, st.attention, delimiter=",", fmt="%.10g", header=head)
        paths.append(path)
    print(json.dumps({"initial": paths[0], "optimized": paths[1], "status": res.status}))
    return 0


def cmd_inspect(args) -> int:
    with open(args.path, "rb") as fh:
        data = fh.read()
    magic = data[:8]
    if magic == EMB_MAGIC:
        st = decode_embeddings(data)
        info = {"format": "DAEREMB1", "dim": st.dim, "count": len(st)}
    elif magic == IDX_MAGIC:
        idx = deserialize_index(data)
        info = {"format": "DAERIDX1", "dim": idx.dim, "items": idx.n_items, "nodes": len(idx.nodes),
                "leaves": len(idx.leaves), "depth": idx.depth}
    elif magic == CKPT_MAGIC:
        blocks = decode_checkpoint(data)
        meta = blocks["meta"]
        info = {"format": "DAERCKPT", "step": meta["step"], "phase": meta["phase"],
                "experiment": meta.get("experiment"), "config_hash": meta["config_hash"],
                "blocks": sorted(blocks)}
    else:
        raise DecodeError(f"unrecognized magic {magic!r}")
    print(json.dumps(info))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "build-index": cmd_build_index, "query": cmd_query,
    "bench": cmd_bench, "export-attn": cmd_export_attn, "inspect": cmd_inspect,
}


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("DAER_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.cmd](args)
    except ConfigError as exc:
        return _fail("usage", EXIT_USAGE, str(exc))
    except DecodeError as exc:
        return _fail("decode", EXIT_DECODE, str(exc))
    except ShapeError as exc:
        return _fail("dimension", EXIT_DIM, str(exc))
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        return _fail("other", EXIT_OTHER, f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
