"""Command line harness: gen-data, train, split, build-index, build-dict,
serve-*, query, eval, bench.  Every report is JSON on stdout (or ``--report``)."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import nncore
from .bench import bench
from .broker import Broker
from .embedstore import build_dictionary, save_dictionary
from .errors import InputError, SplitRankError
from .evaluation import evaluate
from .frontend import Frontend
from .indexer import build_shards, compute_member_vectors, ingest_members
from .searcher import SearcherNode, load_shard
from .splitter import ModelVersion, load_bundle, save_split, split
from .synth import (SyntheticConfig, gen_synthetic, query_token_frequency, read_jsonl, triples_from_rows,
                    write_synthetic)
from .vocab import Vocabulary
from .wire import Client, serve

logger = logging.getLogger("splitrank")

TRAIN_DEFAULTS = {"embed_dim": 16, "query_hidden": [64], "member_hidden": [128, 64], "activation": "tanh",
                  "cross": "cosine", "cross_hidden": [32, 1], "pooling": "mean", "lr": 0.01, "epochs": 20,
                  "batch_size": 64, "margin": 0.0, "optimizer": "adam"}


def _emit(report: dict, out=None):
    text = json.dumps(report, indent=1, sort_keys=True, default=float)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def cmd_gen_data(args):
    cfg = SyntheticConfig.from_json(args.config) if args.config else SyntheticConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    data = gen_synthetic(cfg)
    write_synthetic(data, args.out)
    n_syn = sum(q["synonym"] for q in data.queries)
    return {"out": str(args.out), "members": len(data.members), "train_triples": len(data.train),
            "heldout_triples": len(data.heldout), "test_queries": len(data.queries), "synonym_queries": n_syn,
            "config": asdict(cfg)}


def train_from_data(data_dir, spec_cfg: dict, seed: int):
    data_dir = Path(data_dir)
    cfg = {**TRAIN_DEFAULTS, **spec_cfg}
    vocab = Vocabulary.from_dict(json.loads((data_dir / "vocab.json").read_text()))
    members = {m.uid: m for m in ingest_members(data_dir / "corpus.jsonl")}
    train_set = triples_from_rows(read_jsonl(data_dir / "train.jsonl"), members)
    spec = nncore.default_spec(vocab, embed_dim=cfg["embed_dim"], query_hidden=cfg["query_hidden"],
                               member_hidden=cfg["member_hidden"], activation=cfg["activation"],
                               cross=cfg["cross"], cross_hidden=cfg["cross_hidden"], pooling=cfg["pooling"])
    model = nncore.TwoTowerModel.initialize(spec, seed=seed, vocab=vocab)
    result = nncore.train(model, train_set, lr=cfg["lr"], epochs=cfg["epochs"], seed=seed,
                          margin=cfg["margin"], batch_size=cfg["batch_size"], optimizer=cfg["optimizer"])
    held_path = data_dir / "heldout.jsonl"
    accuracy = None
    if held_path.exists():
        accuracy = nncore.pairwise_accuracy(result.model, triples_from_rows(read_jsonl(held_path), members))
    return result, accuracy


def cmd_train(args):
    spec_cfg = json.loads(Path(args.spec).read_text()) if args.spec else {}
    for key in ("epochs", "lr"):
        if getattr(args, key) is not None:
            spec_cfg[key] = getattr(args, key)
    result, accuracy = train_from_data(args.data, spec_cfg, args.seed)
    nncore.save_model(result.model, args.out, version=f"seed{args.seed}")
    return {"out": str(args.out), "loss_trace": result.loss_trace, "heldout_pairwise_accuracy": accuracy}


def cmd_split(args):
    model = nncore.load_model(args.model)
    bundles = split(model, ModelVersion(args.version, args.label))
    paths = save_split(bundles, args.out)
    return {"version": args.version, "bundles": {k: str(v) for k, v in paths.items()}}


def cmd_build_index(args):
    bundle = load_bundle(args.member_arm)
    profiles = ingest_members(args.members)
    vectors = compute_member_vectors(bundle, profiles, args.batch_size)
    shards = build_shards(profiles, vectors, args.shards, bundle.version, quantization=args.quantization,
                          out_dir=args.out)
    return {"out": str(args.out), "version": bundle.version.version_id,
            "shards": [{"shard_id": s.shard_id, "records": len(s.forward), "terms": len(s.inverted)}
                       for s in shards]}


def cmd_build_dict(args):
    bundle = load_bundle(args.query_arm)
    freq = query_token_frequency(read_jsonl(args.queries)) if args.queries else {}
    d = build_dictionary(bundle, args.top_k, freq)
    save_dictionary(d, args.out)
    return {"out": str(args.out), "version": d.version.version_id, "entries": len(d),
            "bytes": d.serialized_size()}


def cmd_serve_searcher(args):
    node = SearcherNode(load_shard(args.shard), load_bundle(args.cross))
    serve(node.handle, args.listen)


def cmd_serve_broker(args):
    serve(Broker.from_config(args.config).handle, args.listen)


def cmd_serve_frontend(args):
    serve(Frontend.from_config(args.config).handle, args.listen)


def _parse_facets(pairs) -> dict[str, list[str]]:
    facets: dict[str, list[str]] = {}
    for p in pairs or []:
        name, sep, value = p.partition("=")
        if not sep:
            raise InputError(f"--facet expects name=value, got {p!r}")
        facets.setdefault(name, []).append(value)
    return facets


def cmd_query(args):
    client = Client(args.frontend, timeout=30.0)
    extra = {}
    if args.w_sem is not None:
        extra["w_sem"] = args.w_sem
    if args.w_term is not None:
        extra["w_term"] = args.w_term
    if args.queries:
        rows = read_jsonl(args.queries)
        out_lines, degraded = [], 0
        for q in rows:
            reply = client.request({"type": "user_search", "text": q.get("text", ""),
                                    "facets": q.get("facets", {}), "k": args.k, **extra})
            if reply.get("type") != "results":
                raise SplitRankError(f"query {q.get('qid')}: {reply}")
            degraded += bool(reply["degraded"])
            out_lines.append({"qid": q["qid"], "hits": [h["uid"] for h in reply["hits"]],
                              "scores": [h["score"] for h in reply["hits"]]})
        if args.out:
            with open(args.out, "w") as fh:
                for line in out_lines:
                    fh.write(json.dumps(line) + "\n")
        return {"queries": len(rows), "degraded": degraded, "out": args.out}
    return client.request({"type": "user_search", "text": args.text or "", "facets": _parse_facets(args.facet),
                           "k": args.k, **extra})


def cmd_eval(args):
    return evaluate(read_jsonl(args.run), read_jsonl(args.judgments), args.k).to_json()


def cmd_bench(args):
    report = bench(args.target, read_jsonl(args.requests), args.concurrency, args.duration)
    if args.dump:
        Path(args.dump).write_text(json.dumps(report["raw_ms"]))
    report.pop("raw_ms")
    return report


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitrank", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--report", help="write the JSON report here instead of stdout")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate the synthetic corpus and query logs")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train the two-tower model")
    s.add_argument("--data", required=True)
    s.add_argument("--spec")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("split", help="split a model into query/member/cross bundles")
    s.add_argument("--model", required=True)
    s.add_argument("--version", type=int, required=True)
    s.add_argument("--label", default="")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("build-index", help="run the member arm and write shard indexes")
    s.add_argument("--members", required=True)
    s.add_argument("--member-arm", required=True)
    s.add_argument("--shards", type=int, default=1)
    s.add_argument("--quantization", choices=("int8", "none"), default="int8")
    s.add_argument("--batch-size", type=int, default=512)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_index)

    s = sub.add_parser("build-dict", help="extract the query-side token dictionary")
    s.add_argument("--query-arm", required=True)
    s.add_argument("--top-k", type=int, required=True)
    s.add_argument("--queries", help="query log (jsonl) used for token frequencies")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_dict)

    s = sub.add_parser("serve-searcher")
    s.add_argument("--shard", required=True)
    s.add_argument("--cross", required=True)
    s.add_argument("--listen", required=True)
    s.set_defaults(func=cmd_serve_searcher)

    s = sub.add_parser("serve-broker")
    s.add_argument("--config", required=True)
    s.add_argument("--listen", required=True)
    s.set_defaults(func=cmd_serve_broker)

    s = sub.add_parser("serve-frontend")
    s.add_argument("--config", required=True)
    s.add_argument("--listen", required=True)
    s.set_defaults(func=cmd_serve_frontend)

    s = sub.add_parser("query", help="send one query, or a query file, to a frontend")
    s.add_argument("--frontend", required=True)
    s.add_argument("--text")
    s.add_argument("--facet", action="append", help="name=value, repeatable")
    s.add_argument("--queries", help="jsonl of {qid, text, facets}; writes a run file")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--w-sem", type=float)
    s.add_argument("--w-term", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("eval", help="precision@k of a run against judgments")
    s.add_argument("--run", required=True)
    s.add_argument("--judgments", required=True)
    s.add_argument("--k", type=int, default=10)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="replay requests against a server")
    s.add_argument("--target", required=True)
    s.add_argument("--requests", required=True)
    s.add_argument("--concurrency", type=int, default=1)
    s.add_argument("--duration", type=float, default=10.0)
    s.add_argument("--dump", help="write raw per-request latencies (ms) here")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        report = args.func(args)
    except SplitRankError as exc:
        _emit({"error": exc.code, "message": str(exc)}, args.report)
        return 1
    except KeyboardInterrupt:
        return 130
    if report is not None:
        _emit(report, args.report)
    return 0


if __name__ == "__main__":
    sys.exit(main())
