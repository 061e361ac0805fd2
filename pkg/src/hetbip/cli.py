"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .analysis import cluster_embeddings, project_2d, summarize_clusters
from .baselines import BaselineVariant, GcnConfig, evaluate_variant, feature_space
from .config import ConfigError, read_config
from .errors import DataError, NumericalError
from .evaluation import ModelSpec
from .graph import load_labels
from .model import (
    MissingKeyError,
    TrainConfig,
    embed_all,
    embedding_table,
    export_embeddings,
    gradient_check,
    import_embeddings,
    load_checkpoint,
    pack_graph,
    save_checkpoint,
    tiny_problem,
)
from .pipeline import evaluate_table, gcn_table, load_graph, prepare, train_embeddings
from .sampling import WalkConfig
from .synth import PROFILES, generate, profile

log = logging.getLogger("hetbip")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------- argument groups


def _common(p, out_required=True):
    p.add_argument("--config", help="key = value file; command-line flags win")
    p.add_argument("--seed", type=int, default=0, help="root seed")
    p.add_argument("--threads", type=int, default=1, help="worker and BLAS threads")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _data(p):
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--text-dim", type=int, default=384)
    p.add_argument("--image-dim", type=int, default=2048)
    p.add_argument("--hash-seed", type=int, default=0)


def _walks(p):
    p.add_argument("--walk-length", type=int, default=30)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--walks-per-node", type=int, default=10)
    p.add_argument("--restart", type=float, default=0.5)
    p.add_argument("--topk-user", type=int, default=10)
    p.add_argument("--topk-tweet", type=int, default=10)


def _train(p):
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--negatives", type=int, default=1, help="negatives per positive pair")
    p.add_argument("--pairs-per-epoch", type=int, default=TrainConfig.pairs_per_epoch,
                   help="positive pairs sampled per epoch; 0 uses all")
    p.add_argument("--loss-sign", default="standard", choices=["standard", "paper-literal"])


def _classifier(p):
    p.add_argument("--model", default="logreg", choices=["logreg", "rf"])
    p.add_argument("--k", type=int, default=10, help="cross-validation folds")
    p.add_argument("--C", type=float, default=0.5)
    p.add_argument("--trees", type=int, default=100)


def build_parser() -> Parser:
    parser = Parser(prog="hetbip", description="Bipartite heterogeneous graph embeddings and evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("synth", help="generate a synthetic two-community dataset")
    _common(p)
    p.add_argument("--profile", default="small", choices=sorted(PROFILES))

    p = sub.add_parser("ingest", help="load and validate a dataset, write the graph")
    _common(p)
    _data(p)

    p = sub.add_parser("sample", help="random walks and neighbor sets")
    _common(p)
    _data(p)
    _walks(p)

    p = sub.add_parser("train", help="train the encoder and write embeddings")
    _common(p)
    _data(p)
    _walks(p)
    _train(p)

    p = sub.add_parser("embed", help="embeddings from a saved checkpoint")
    _common(p)
    _data(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("baseline", help="comparison models")
    _common(p)
    _data(p)
    _walks(p)
    _classifier(p)
    p.add_argument("--variant", required=True, choices=[v.value for v in BaselineVariant])
    p.add_argument("--pca-dim", type=int, default=128)
    p.add_argument("--gcn-steps", type=int, default=GcnConfig.steps)
    p.add_argument("--tau", type=float, default=GcnConfig.tau)

    p = sub.add_parser("evaluate", help="cross-validated ideology detection from embeddings")
    _common(p)
    _classifier(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", required=True)

    p = sub.add_parser("analyze", help="clusters, activity, word frequencies and 2-D coordinates")
    _common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--graph", required=True, help="dataset directory")
    p.add_argument("--labels", help="labels.jsonl with political scores")
    p.add_argument("--k-min", type=int, default=2)
    p.add_argument("--k-max", type=int, default=8)
    p.add_argument("--top-n", type=int, default=20)
    p.add_argument("--text-dim", type=int, default=384)
    p.add_argument("--image-dim", type=int, default=2048)

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    _common(p, out_required=False)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--h", type=float, default=1e-5)
    return parser


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sp = _subparser(parser, args.command)
        dests = {a.dest for a in sp._actions} - {"help", "config"}
        try:
            values = read_config(args.config)
        except (ConfigError, OSError) as exc:
            raise UsageError(str(exc)) from None
        unknown = sorted(set(values) - dests)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        sp.set_defaults(**values)
        args = parser.parse_args(argv)
        for a in sp._actions:
            if a.choices is not None and a.dest in values and getattr(args, a.dest) not in a.choices:
                raise UsageError(f"config value {a.dest} = {getattr(args, a.dest)!r} is not one of {list(a.choices)}")
    return args


# --------------------------------------------------------------------------- helpers


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _inputs(args) -> dict:
    paths = []
    for key in ("data", "graph"):
        d = getattr(args, key, None)
        if d:
            paths += sorted(p for p in Path(d).iterdir() if p.is_file() and p.name != "manifest.json")
    for key in ("embeddings", "labels", "checkpoint", "config"):
        f = getattr(args, key, None)
        if f:
            paths.append(Path(f))
    return {str(p): _digest(p) for p in paths if p.exists()}


def write_manifest(out: Path, args, extra=None) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose",)}
    doc = {
        "tool": "hetbip",
        "version": __version__,
        "command": args.command,
        "seed": args.seed,
        "config": config,
        "inputs": _inputs(args),
    }
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _walk_config(args) -> WalkConfig:
    return WalkConfig(
        walk_length=args.walk_length,
        window=args.window,
        walks_per_node=args.walks_per_node,
        restart_prob=args.restart,
        topk_user=args.topk_user,
        topk_tweet=args.topk_tweet,
        seed=args.seed,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        negatives_per_positive=args.negatives,
        dim=args.dim,
        pairs_per_epoch=args.pairs_per_epoch or None,
        loss_sign=args.loss_sign,
    )


def _spec(args, pca_dim=None) -> ModelSpec:
    return ModelSpec(kind=args.model, C=args.C, n_trees=args.trees, pca_dim=pca_dim, seed=args.seed)


def _write_metrics(out: Path, report, title):
    (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    text = report.table(title)
    (out / "metrics.txt").write_text(text + "\n", encoding="utf-8")
    print(text)


# --------------------------------------------------------------------------- commands


def cmd_synth(args, out):
    summary = generate(profile(args.profile, seed=args.seed), out)
    print(json.dumps(summary, sort_keys=True))
    return {"summary": summary}


def cmd_ingest(args, out):
    g = load_graph(args.data, args.text_dim, args.image_dim)
    (out / "graph.json").write_bytes(g.serialize())
    summary = {
        "users": g.n_users,
        "tweets": g.n_tweets,
        "edges": g.n_edges,
        "synthetic_users": sum(u.synthetic for u in g.users),
        "labeled_users": 0 if g.label_map is None else len(g.label_map),
    }
    print(json.dumps(summary, sort_keys=True))
    return {"summary": summary}


def cmd_sample(args, out):
    g = load_graph(args.data, args.text_dim, args.image_dim, with_labels=False)
    prep = prepare(g, _walk_config(args), args.threads)
    with open(out / "walks.txt", "w", encoding="utf-8") as fh:
        for w in prep.walks:
            fh.write(" ".join(g.external_id(n) for n in w) + "\n")
    with open(out / "neighbors.jsonl", "w", encoding="utf-8") as fh:
        for n in range(g.n_nodes):
            row = {
                "id": g.external_id(n),
                "users": [[g.external_id(m), c] for m, c in prep.neighbor_sets.user[n]],
                "tweets": [[g.external_id(m), c] for m, c in prep.neighbor_sets.tweet[n]],
            }
            fh.write(json.dumps(row) + "\n")
    print(f"{len(prep.walks)} walks over {g.n_nodes} nodes")


def cmd_train(args, out):
    g = load_graph(args.data, args.text_dim, args.image_dim, with_labels=False)
    prep = prepare(g, _walk_config(args), args.threads)
    cfg = _train_config(args)
    start = time.perf_counter()
    res = train_embeddings(prep, cfg, args.text_dim, args.hash_seed,
                           progress=lambda e, l: log.info("epoch %d mean loss %.6f", e, l))
    export_embeddings(res.table, out / "embeddings.tsv")
    with open(out / "attention.tsv", "w", encoding="utf-8") as fh:
        fh.write("id\tself\tuser\ttweet\n")
        for i, a in zip(res.table.ids, res.table.alpha):
            fh.write(f"{i}\t{float(a[0])!r}\t{float(a[1])!r}\t{float(a[2])!r}\n")
    save_checkpoint(out / "checkpoint.npz", res.params, {k: v for k, v in vars(args).items()
                                                         if k not in ("verbose", "config")}, args.seed)
    (out / "losses.json").write_text(json.dumps(res.epoch_losses) + "\n", encoding="utf-8")
    print(f"wrote {len(res.table)} embeddings of dim {res.table.dim}; epoch losses {res.epoch_losses}")
    return {"train_seconds": round(time.perf_counter() - start, 3)}


def cmd_embed(args, out):
    params, meta = load_checkpoint(args.checkpoint)
    cfg = meta["config"]
    g = load_graph(args.data, args.text_dim, args.image_dim, with_labels=False)
    wc = WalkConfig(cfg["walk_length"], cfg["window"], cfg["walks_per_node"], cfg["restart"],
                    cfg["topk_user"], cfg["topk_tweet"], meta["seed"])
    prep = prepare(g, wc, args.threads)
    from .encoders import encode_graph

    attrs, _ = encode_graph(g, args.text_dim, args.hash_seed)
    gt = pack_graph(attrs, prep.neighbor_sets)
    if gt.tag_dims() != params.tag_dims:
        raise DataError(f"checkpoint attribute dims {params.tag_dims} do not match the data {gt.tag_dims()}")
    E, alpha = embed_all(params, gt)
    if not np.all(np.isfinite(E)):
        raise NumericalError("non-finite embeddings")
    export_embeddings(embedding_table(g, E, alpha), out / "embeddings.tsv")
    print(f"wrote {g.n_nodes} embeddings of dim {E.shape[1]}")


def cmd_baseline(args, out):
    variant = BaselineVariant(args.variant)
    g = load_graph(args.data, args.text_dim, args.image_dim)
    if variant == BaselineVariant.GCN:
        prep = prepare(g.unlabeled(), _walk_config(args), args.threads)
        cfg = GcnConfig(steps=args.gcn_steps, tau=args.tau, window=args.window, seed=args.seed)
        table = gcn_table(prep, cfg, args.text_dim, args.image_dim, args.hash_seed)
        export_embeddings(table, out / "embeddings.tsv")
        print(f"wrote {len(table)} GCN embeddings of dim {table.dim}")
        return None
    space = feature_space(g, args.text_dim, args.image_dim, args.hash_seed)
    report = evaluate_variant(g, variant, space, _spec(args, args.pca_dim), args.k, args.seed)
    idx, _ = g.labeled_users()
    with open(out / "predictions.jsonl", "w", encoding="utf-8") as fh:
        for i, s, p in zip(idx, report.scores, report.predictions):
            fh.write(json.dumps({"user_id": g.external_id(int(i)), "score": 1.0 if p else -1.0,
                                 "probability": float(s)}, sort_keys=True) + "\n")
    _write_metrics(out, report, f"{variant.value} / {args.model}")
    return None


def cmd_evaluate(args, out):
    table = import_embeddings(args.embeddings)
    labels = load_labels(args.labels)
    report = evaluate_table(table, labels, _spec(args), args.k, args.seed)
    _write_metrics(out, report, f"embeddings / {args.model}")


def cmd_analyze(args, out):
    g = load_graph(args.graph, args.text_dim, args.image_dim, with_labels=False)
    table = import_embeddings(args.embeddings)
    scores = load_labels(args.labels) if args.labels else {}
    users = [i for i in range(g.n_users) if g.external_id(i) in table]
    if len(users) < 2:
        raise DataError("need embeddings for at least two users")
    ids = [g.external_id(i) for i in users]
    X = table.lookup(ids)
    k_max = min(args.k_max, len(users))
    if args.k_min < 2 or k_max < args.k_min:
        raise UsageError(f"invalid k range [{args.k_min}, {args.k_max}] for {len(users)} users")
    report = cluster_embeddings(X, range(args.k_min, k_max + 1), args.seed)
    by_index = {g.user_index[i]: s for i, s in scores.items() if i in g.user_index}
    summary = summarize_clusters(report, g, np.array(users), by_index, top_n=args.top_n)
    doc = report.to_dict()
    doc["assignments"] = {i: int(c) for i, c in zip(ids, report.labels)}
    (out / "clusters.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    with open(out / "activity.tsv", "w", encoding="utf-8") as fh:
        fh.write("cluster\tsize\tmean_score\tusers_per_unique_tweet\n")
        for c in summary:
            ms = "" if c["mean_score"] is None else f"{c['mean_score']:.6f}"
            act = "" if c["activity"] is None else f"{c['activity']:.6f}"
            fh.write(f"{c['cluster']}\t{c['size']}\t{ms}\t{act}\n")
    with open(out / "wordfreq.tsv", "w", encoding="utf-8") as fh:
        fh.write("cluster\trank\tword\tcount\n")
        for c in summary:
            for r, (w, n) in enumerate(c["top_words"], start=1):
                fh.write(f"{c['cluster']}\t{r}\t{w}\t{n}\n")
    coords = project_2d(X)
    with open(out / "coords.tsv", "w", encoding="utf-8") as fh:
        fh.write("id\tx\ty\tscore\n")
        for i, (x, y) in zip(ids, coords.tolist()):
            s = scores.get(i)
            fh.write(f"{i}\t{x!r}\t{y!r}\t{'' if s is None else repr(s)}\n")
    print(f"k = {report.k}; silhouettes " + ", ".join(f"{k}: {v:.4f}" for k, v in report.silhouettes.items()))


def cmd_gradcheck(args, out):
    prob = tiny_problem(args.seed, d=args.d)
    err = gradient_check(prob.params, prob.gt, prob.triple, h=args.h)
    print(f"max relative error {err:.3e}")
    if out is not None:
        (out / "gradcheck.json").write_text(json.dumps({"seed": args.seed, "max_rel_err": err}) + "\n")
    if err > GRADCHECK_TOL:
        raise NumericalError(f"gradient check failed: {err:.3e} > {GRADCHECK_TOL:g}")
    return {"max_rel_err": err}


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "sample": cmd_sample,
    "train": cmd_train,
    "embed": cmd_embed,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"hetbip: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out) if args.out else None
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=args.threads):
            extra = COMMANDS[args.command](args, out)
        if out is not None:
            write_manifest(out, args, extra)
        return 0
    except (UsageError, ValueError) as exc:
        print(f"hetbip: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MissingKeyError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"hetbip: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"hetbip: numerical failure: {exc}", file=sys.stderr)
        if out is not None:
            write_manifest(out, args, {"failed": str(exc)})
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
