"""Command-line entry point: ``d2dpath <subcommand> [flags]``.

Each stage reads the files written by the stages before it (all under
``--out``) and prints a one-line JSON summary. Exit codes: 0 success,
1 internal error, 2 bad input or usage, 3 failed gradient check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cascade, features, kmeans, prototypes
from . import config as config_mod
from . import generation as gen
from . import pipeline as pl
from . import synthcascade as sc
from . import training as tr
from .baselines import ABLATION_ROWS, FeatureMask
from .errors import InputError, TrainingError
from .model import gradcheck_random_trees

log = logging.getLogger("d2dpath")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(InputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# stage files ---------------------------------------------------------------------

def _p(cfg, name):
    defaults = {"generator": "generator.json", "records": "records.jsonl",
                "truth": "truth_trees.jsonl", "gps": "gps.json", "features": "features.jsonl",
                "norm": "norm.json", "prototypes": "prototypes.json",
                "user_prototypes": "user_prototypes.json", "trees": "trees.jsonl",
                "split": "split", "model": "model.json", "metrics": "metrics.csv",
                "history": "history.json", "eval": "eval.json", "reports": "reports",
                "generated": "generated.jsonl", "compare": "compare.json", "dot": "dot"}
    return cfg.path(name, defaults[name])


def _need(path: Path) -> Path:
    if not path.exists():
        raise InputError(f"missing input {path}; run the earlier stage first")
    return path


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path):
    with open(_need(path)) as fh:
        return json.load(fh)


def _load_features(cfg) -> pl.FeatureSet:
    raw = features.read_features(_need(_p(cfg, "features")))
    users = sorted(raw, key=pl._user_key)
    norm = features.NormStats.from_dict(_read_json(_p(cfg, "norm")))
    gps = kmeans.load(_need(_p(cfg, "gps")))
    return pl.FeatureSet(gps, norm, users, np.array([raw[u] for u in users]))


def _split_dir(cfg) -> Path:
    return _p(cfg, "split")


def _load_split(cfg) -> cascade.DatasetSplit:
    d = _split_dir(cfg)
    return cascade.DatasetSplit(*(cascade.read_trees(_need(d / f"{s}.jsonl"))
                                  for s in ("train", "val", "test")))


def _load_data(cfg, labels: str):
    """(split, Labelled) from k-means prototypes or from the simulator's own."""
    it = cfg.train.internal_terminal
    if labels == "planted":
        gcfg = sc.GeneratorConfig.load(_need(_p(cfg, "generator")))
        fs = _load_features(cfg)
        trees = cascade.read_trees(_need(_p(cfg, "truth")))
        user_proto = {u: gcfg.user_prototype(u) for u in fs.users}
        return pl.planted_labelled(trees, fs, user_proto, gcfg.k, cfg.seed, cfg.ratios, it)
    pm = prototypes.load(_need(_p(cfg, "prototypes")))
    sp = _load_split(cfg)
    return sp, pl.to_labelled(sp, pm, it)


# subcommands --------------------------------------------------------------------

def cmd_simulate(cfg, args):
    g = dict(cfg.generator)
    n_trees = int(g.pop("n_trees", 5000))
    g.setdefault("seed", cfg.seed)
    gcfg = sc.planted_config(**g)
    trees, records = sc.generate(gcfg, n_trees, cfg.threads)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    gcfg.save(_p(cfg, "generator"))
    features.write_records(_p(cfg, "records"), records)
    cascade.write_trees(_p(cfg, "truth"), trees)
    return {"n_trees": len(trees), "n_records": len(records), "n_users": gcfg.n_users,
            "bayes_accuracy": sc.bayes_accuracy(gcfg, trees, cfg.train.internal_terminal)}


def cmd_cluster_gps(cfg, args):
    records = features.read_records(_need(_p(cfg, "records")))
    model = pl.cluster_gps(records, cfg.n_regions, cfg.seed, cfg.threads)
    kmeans.save(model, _p(cfg, "gps"))
    return {"n_regions": model.k, "inertia": model.inertia}


def cmd_build_features(cfg, args):
    records = features.read_records(_need(_p(cfg, "records")))
    fs = pl.featurize(records, kmeans.load(_need(_p(cfg, "gps"))), cfg.threads)
    features.write_features(_p(cfg, "features"), fs.by_user())
    _write_json(_p(cfg, "norm"), fs.norm.to_dict())
    return {"n_users": len(fs.users), "dim": int(fs.matrix.shape[1])}


def cmd_build_prototypes(cfg, args):
    fs = _load_features(cfg)
    if cfg.k > len(fs.users):
        raise InputError(f"k={cfg.k} exceeds the number of users ({len(fs.users)})")
    pm = prototypes.build_prototypes(fs.matrix, cfg.k, seed=cfg.seed, threads=cfg.threads,
                                     n_init=cfg.n_init)
    prototypes.save(pm, _p(cfg, "prototypes"))
    user_proto = pl.user_prototypes(fs, pm, cfg.threads)
    _write_json(_p(cfg, "user_prototypes"), [[u, p] for u, p in user_proto.items()])
    return {"k": pm.k, "inertia": pm.cluster.inertia, "n_users": len(user_proto)}


def cmd_make_trees(cfg, args):
    records = features.read_records(_need(_p(cfg, "records")))
    trees, report = cascade.build_trees_report(records)
    trees = pl.order_trees(trees)
    labelled = _p(cfg, "user_prototypes").exists()
    if labelled:
        user_proto = {u: p for u, p in _read_json(_p(cfg, "user_prototypes"))}
        trees = pl.label_trees(trees, user_proto)
    cascade.write_trees(_p(cfg, "trees"), trees)
    return {"n_trees": len(trees), "labelled": labelled,
            "duplicate_receipts": report.duplicate_receipts, "self_transfers": report.self_transfers}


def cmd_split(cfg, args):
    sp = cascade.split(cascade.read_trees(_need(_p(cfg, "trees"))), cfg.ratios, cfg.seed)
    d = _split_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        cascade.write_trees(d / f"{name}.jsonl", getattr(sp, name))
    return {"train": len(sp.train), "val": len(sp.val), "test": len(sp.test)}


def cmd_train(cfg, args):
    _, data = _load_data(cfg, args.labels)
    model, hist = tr.run_one(cfg.train, data)
    tr.save_model(model, _p(cfg, "model"), cfg.train)
    _p(cfg, "metrics").write_text(hist.to_csv())
    _write_json(_p(cfg, "history"), {"epochs": hist.epochs, "summary": hist.summary(),
                                     "config": {k: v for k, v in cfg.train.to_dict().items()
                                                if k != "threads"}})
    return hist.summary()


def cmd_eval(cfg, args):
    model, header = tr.load_model(_need(_p(cfg, "model")))
    mask = FeatureMask(**header.get("mask", {}))
    _, data = _load_data(cfg, args.labels)
    table = tr.model_table(data.centroids, mask)
    out = {}
    for split in ("val", "test"):
        out[f"{split}_loss"], out[f"{split}_acc"] = tr.evaluate(model, getattr(data, split), table,
                                                                mask.use_content)
    _write_json(_p(cfg, "eval"), out)
    return out


def _report(cfg, name, rows, columns):
    d = _p(cfg, "reports")
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{name}.txt").write_text(tr.text_table(rows, columns))
    (d / f"{name}.csv").write_text(tr.csv_table(rows, columns))
    (d / f"{name}.json").write_text(tr.json_rows(rows))


def cmd_ablate(cfg, args):
    _, data = _load_data(cfg, args.labels)
    rows = tr.ablation_grid(cfg.train, data, ABLATION_ROWS)
    _report(cfg, "ablation", rows, tr.ABLATION_COLUMNS)
    return {"rows": len(rows), "test_acc": [round(r["test_acc"], 6) for r in rows]}


def cmd_sweep_k(cfg, args):
    records = features.read_records(_need(_p(cfg, "records")))
    fs = _load_features(cfg)
    trees = pl.order_trees(cascade.build_trees(records))

    def relabel(k):
        if k > len(fs.users):
            return None
        return pl.prepare_from_features(fs, trees, k, cfg.seed, cfg.threads, cfg.ratios,
                                        cfg.train.internal_terminal, cfg.n_init).data

    rows = tr.prototype_sweep(cfg.sweep_k, relabel, cfg.train)
    _report(cfg, "sweep", rows, ["k", "train_acc", "test_acc", "test_loss", "convergence_step"])
    best = max(rows, key=lambda r: r["test_acc"]) if rows else None
    return {"rows": len(rows), "best_k": best and best["k"]}


def cmd_gradcheck(cfg, args):
    rep = gradcheck_random_trees(args.trees, args.hidden, args.k, args.input_dim, args.max_nodes,
                                 cfg.seed, tol=args.tol)
    out = rep.to_dict()
    if not rep.passed:
        out["status"] = "failed"
    return out


def _table_for(cfg, labels, header):
    mask = FeatureMask(**header.get("mask", {}))
    sp, data = _load_data(cfg, labels)
    return sp, tr.model_table(data.centroids, mask), mask.use_content


def cmd_generate(cfg, args):
    model, header = tr.load_model(_need(_p(cfg, "model")))
    sp, table, content = _table_for(cfg, args.labels, header)
    roots = [(t.node(t.root).prototype_id, t.content_category) for t in sp.test]
    trees = gen.generate_many(model, roots, cfg.generate, table, content)
    for t, truth in zip(trees, sp.test):
        t.content_id = truth.content_id
    cascade.write_trees(_p(cfg, "generated"), trees)
    sizes = [len(t) for t in trees]
    return {"n_trees": len(trees), "mean_nodes": float(np.mean(sizes)) if sizes else 0.0,
            "max_nodes": max(sizes, default=0)}


def cmd_compare(cfg, args):
    pred = cascade.read_trees(_need(_p(cfg, "generated")))
    sp, _ = _load_data(cfg, args.labels)
    if len(pred) != len(sp.test):
        raise InputError(f"{len(pred)} generated trees for {len(sp.test)} test trees")
    total = gen.TreeDiff()
    dot_dir = _p(cfg, "dot")
    if args.dot:
        dot_dir.mkdir(parents=True, exist_ok=True)
    for i, (p, t) in enumerate(zip(pred, sp.test)):
        d = gen.compare_trees(p, t)
        for key in ("correct", "wrong", "missing", "extra"):
            setattr(total, key, getattr(total, key) + getattr(d, key))
        if i < args.dot:
            (dot_dir / f"tree{i}.dot").write_text(gen.diff_to_dot(p, t, d, f"tree{i}"))
    out = total.to_dict()
    truth_nodes = total.correct + total.wrong + total.missing
    out["node_recall"] = total.correct / truth_nodes if truth_nodes else 0.0
    _write_json(_p(cfg, "compare"), out)
    return out


COMMANDS = {
    "simulate": (cmd_simulate, "run the planted simulator; write records and true trees"),
    "cluster-gps": (cmd_cluster_gps, "cluster record GPS fixes into regions"),
    "build-features": (cmd_build_features, "build normalized per-user social features"),
    "build-prototypes": (cmd_build_prototypes, "cluster users into k prototypes"),
    "make-trees": (cmd_make_trees, "rebuild diffusion trees from the record log"),
    "split": (cmd_split, "split trees into train/val/test"),
    "train": (cmd_train, "train a model"),
    "eval": (cmd_eval, "evaluate the trained model"),
    "ablate": (cmd_ablate, "run the six-row feature/model ablation"),
    "sweep-k": (cmd_sweep_k, "re-cluster and re-train for several prototype counts"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the tree model"),
    "generate": (cmd_generate, "generate trees from test roots"),
    "compare": (cmd_compare, "compare generated trees with the test trees"),
}

LABELLED = {"train", "eval", "ablate", "generate", "compare"}
TRAIN_FLAGS = {"train", "ablate", "sweep-k"}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    # SUPPRESS keeps a flag given before the subcommand from being reset after it
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="working directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="d2dpath", parents=[common],
                     description="Diffusion-path prediction with a top-down tree LSTM.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name in LABELLED:
            p.add_argument("--labels", choices=("kmeans", "planted"), default="kmeans",
                           help="prototype labels: k-means clusters or the simulator's own")
        if name in TRAIN_FLAGS:
            p.add_argument("--model", choices=tr.MODEL_KINDS)
            p.add_argument("--epochs", type=int)
            p.add_argument("--hidden", type=int)
            p.add_argument("--lr", type=float, help="initial learning rate")
            p.add_argument("--batch-size", type=int)
        if name == "simulate":
            p.add_argument("--n-trees", type=int)
        if name in ("build-prototypes", "sweep-k"):
            p.add_argument("--k", type=int, nargs="+" if name == "sweep-k" else None)
        if name == "gradcheck":
            p.add_argument("--hidden", type=int, default=8)
            p.add_argument("--k", type=int, default=5)
            p.add_argument("--trees", type=int, default=10)
            p.add_argument("--max-nodes", type=int, default=10)
            p.add_argument("--input-dim", type=int, default=6)
            p.add_argument("--tol", type=float, default=1e-4)
        if name == "generate":
            p.add_argument("--mode", choices=gen.MODES)
        if name == "compare":
            p.add_argument("--dot", type=int, default=5, help="write DOT files for the first N trees")
    return parser


def resolve(args) -> config_mod.PipelineConfig:
    """Config file values overridden by command-line flags."""
    cfg = config_mod.load(getattr(args, "config", None))
    for key in ("seed", "threads", "out"):
        if hasattr(args, key):
            setattr(cfg, key, getattr(args, key))
    if cfg.threads < 1:
        raise InputError("--threads must be >= 1")
    train = {"threads": cfg.threads, "seed": cfg.seed}
    for flag, key in (("model", "model"), ("epochs", "epochs"), ("hidden", "hidden"),
                      ("lr", "lr_initial"), ("batch_size", "batch_size")):
        if args.command in TRAIN_FLAGS and getattr(args, flag, None) is not None:
            train[key] = getattr(args, flag)
    if "lr_initial" in train and train["lr_initial"] <= cfg.train.lr_reduced:
        train["lr_reduced"] = train["lr_initial"] / 10
    cfg.train = replace(cfg.train, **train)
    cfg.train.validate()
    if args.command == "simulate":
        cfg.generator.setdefault("seed", cfg.seed)
        if args.n_trees is not None:
            cfg.generator["n_trees"] = args.n_trees
    if args.command == "build-prototypes" and args.k is not None:
        cfg.k = args.k
    if args.command == "sweep-k" and args.k:
        cfg.sweep_k = tuple(args.k)
    if args.command == "generate" and args.mode:
        cfg.generate = replace(cfg.generate, mode=args.mode)
    cfg.generate = replace(cfg.generate, seed=cfg.seed)
    cfg.generate.validate()
    return cfg


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"d2dpath: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as e:          # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        result = COMMANDS[args.command][0](cfg, args)
    except (InputError, FileNotFoundError) as e:
        print(json.dumps({"command": args.command, "status": "error", "error": str(e)}))
        return EXIT_INPUT
    except TrainingError as e:
        print(json.dumps({"command": args.command, "status": "error", "error": str(e)}))
        return EXIT_INTERNAL
    except Exception as e:  # noqa: BLE001 - last-resort exit code
        log.exception("internal error")
        print(json.dumps({"command": args.command, "status": "error", "error": repr(e)}))
        return EXIT_INTERNAL
    failed = result.pop("status", None) == "failed"
    print(json.dumps({"command": args.command, "status": "failed" if failed else "ok", **result},
                     sort_keys=True, default=float))
    return EXIT_VERIFY if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
