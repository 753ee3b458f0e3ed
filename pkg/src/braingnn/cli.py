"""Command-line pipeline: generate | train | eval | decompose | interpret |
explain | gradcheck.

Every stage is a pure function of (config, seed, input files). All
randomness flows from one root seed: stage seeds are drawn from
numpy SeedSequence(root_seed, spawn_key=(STAGE_ID,)), with per-fold keys
(STAGE_ID, fold). Exit codes: 0 success, 2 config error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_difference_check
from .community import (build_tensor, load_communities, membership_threshold,
                        nncp_decompose, save_communities, save_factors)
from .graph import (BoxCoxParams, GraphDataset, boxcox_apply, load_dataset,
                    preprocess_graphs, save_dataset)
from .model import GNNModel, GraphBatch, ModelConfig, loss, param_count
from .saliency import (ecc, gradient_explanation, node_importance,
                       top_communities_by_ecc, write_report)
from .synthetic import SyntheticSpec, generate_population
from .training import TrainConfig, evaluate, kfold_split, prepare_fold, train

STAGE_IDS = {"split": 0, "generate": 1, "train": 2, "decompose": 3,
             "gradcheck": 4}


class ConfigError(ValueError):
    pass


def stage_seed(root_seed: int, stage: str, fold: int | None = None) -> int:
    key = (STAGE_IDS[stage],) if fold is None else (STAGE_IDS[stage], fold)
    ss = np.random.SeedSequence(root_seed, spawn_key=key)
    return int(ss.generate_state(1)[0])


def _build_section(cls, data: dict, name: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - valid)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{name}' section: {e}")


class RunConfig:
    """Merged model/train/synthetic configuration with pipeline defaults."""

    TOP_KEYS = {"model", "train", "synthetic", "rank", "percentile", "seed"}

    def __init__(self, data: dict):
        unknown = sorted(set(data) - self.TOP_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        self.model = _build_section(ModelConfig, data.get("model", {}), "model")
        self.train = _build_section(TrainConfig, data.get("train", {}), "train")
        self.synthetic = _build_section(SyntheticSpec, data.get("synthetic", {}),
                                        "synthetic")
        self.rank = int(data.get("rank", 5))
        self.percentile = float(data.get("percentile", 95.0))
        self.seed = int(data.get("seed", 0))
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")

    @staticmethod
    def load(path) -> "RunConfig":
        if path is None:
            return RunConfig({})
        with open(path, encoding="utf-8") as f:
            return RunConfig(json.load(f))


def _dump(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f)


def _load_fold_inputs(cfg: RunConfig, out: str, fold: int, root_seed: int):
    ds = load_dataset(os.path.join(out, "dataset.json"))
    splits = kfold_split(ds, cfg.train.folds, stage_seed(root_seed, "split"))
    train_idx, test_idx = splits[fold]
    with open(os.path.join(out, f"preproc_fold{fold}.json"), encoding="utf-8") as f:
        bc = BoxCoxParams.from_dict(json.load(f))
    train_sparse = preprocess_graphs([ds.graphs[i] for i in train_idx],
                                     cfg.percentile)
    test_sparse = preprocess_graphs([ds.graphs[i] for i in test_idx],
                                    cfg.percentile)
    train_norm = boxcox_apply(GraphDataset(train_sparse), bc).graphs
    test_norm = boxcox_apply(GraphDataset(test_sparse), bc).graphs
    model = GNNModel.load(os.path.join(out, f"model_fold{fold}.json"))
    return ds, train_sparse, train_norm, test_norm, model


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(cfg: RunConfig, args) -> int:
    spec = dataclasses.replace(cfg.synthetic,
                               seed=stage_seed(args.seed, "generate"))
    ds = generate_population(spec)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(ds, os.path.join(args.out, "dataset.json"))
    _dump({"planted_nodes": ds.meta["planted_nodes"],
           "background_communities": ds.meta["background_communities"],
           "delta_sig": spec.delta_sig},
          os.path.join(args.out, "ground_truth.json"))
    return 0


def _train_one_fold(payload):
    cfg, out, fold, train_idx, test_idx, ds, seed = payload
    train_graphs, _, bc = prepare_fold(ds, train_idx, test_idx, cfg.percentile)
    tcfg = dataclasses.replace(cfg.train, seed=seed)
    model = GNNModel(cfg.model, seed=seed)
    model, _ = train(model, train_graphs, tcfg,
                     log_path=os.path.join(out, f"log_fold{fold}.csv"))
    model.save(os.path.join(out, f"model_fold{fold}.json"))
    _dump(bc.to_dict(), os.path.join(out, f"preproc_fold{fold}.json"))
    return fold


def cmd_train(cfg: RunConfig, args) -> int:
    ds = load_dataset(os.path.join(args.out, "dataset.json"))
    splits = kfold_split(ds, cfg.train.folds, stage_seed(args.seed, "split"))
    folds = range(cfg.train.folds) if args.fold is None else [args.fold]
    payloads = [(cfg, args.out, f, splits[f][0], splits[f][1], ds,
                 stage_seed(args.seed, "train", f)) for f in folds]
    if args.jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(_train_one_fold, payloads))
    else:
        for p in payloads:
            _train_one_fold(p)
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    folds = range(cfg.train.folds) if args.fold is None else [args.fold]
    per_fold = {}
    for fold in folds:
        _, _, _, test_norm, model = _load_fold_inputs(cfg, args.out, fold,
                                                      args.seed)
        per_fold[str(fold)] = evaluate(model, test_norm).to_dict()
    names = ["accuracy", "f_score", "precision", "recall"]
    mean = {k: float(np.mean([m[k] for m in per_fold.values()])) for k in names}
    _dump({"folds": per_fold, "mean": mean},
          os.path.join(args.out, "metrics.json"))
    return 0


def cmd_decompose(cfg: RunConfig, args) -> int:
    fold = args.fold or 0
    ds = load_dataset(os.path.join(args.out, "dataset.json"))
    splits = kfold_split(ds, cfg.train.folds, stage_seed(args.seed, "split"))
    train_sparse = preprocess_graphs([ds.graphs[i] for i in splits[fold][0]],
                                     cfg.percentile)
    tau = build_tensor(train_sparse)
    rank = args.rank or cfg.rank
    factors = nncp_decompose(tau, rank, seed=stage_seed(args.seed, "decompose"))
    communities = membership_threshold(factors)
    save_factors(factors, os.path.join(args.out, "factors.json"))
    save_communities(communities, os.path.join(args.out, "communities.json"))
    return 0


def cmd_interpret(cfg: RunConfig, args) -> int:
    fold = args.fold or 0
    _, _, train_norm, _, model = _load_fold_inputs(cfg, args.out, fold,
                                                   args.seed)
    communities = load_communities(os.path.join(args.out, "communities.json"))
    eccs = ecc(model, communities, train_norm)
    imp = node_importance(eccs, communities, train_norm[0].n_nodes)
    top = top_communities_by_ecc(eccs)
    write_report(eccs, communities, imp,
                 csv_path=os.path.join(args.out, "node_importance.csv"),
                 json_path=os.path.join(args.out, "interpretation.json"))
    _dump([e.community for e in top],
          os.path.join(args.out, "top_communities.json"))
    return 0


def cmd_explain(cfg: RunConfig, args) -> int:
    fold = args.fold or 0
    _, _, train_norm, _, model = _load_fold_inputs(cfg, args.out, fold,
                                                   args.seed)
    imp = gradient_explanation(model, train_norm)
    _dump(imp.to_dict(), os.path.join(args.out, "attribute_importance.json"))
    _plot_attribute_importance(imp,
                               os.path.join(args.out, "attribute_importance.png"))
    return 0


def _plot_attribute_importance(imp, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .graph import NODE_ATTR_NAMES
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(range(len(imp.relative)), imp.relative)
    ax.set_xticks(range(len(imp.relative)))
    ax.set_xticklabels(NODE_ATTR_NAMES[:len(imp.relative)], rotation=45,
                       ha="right")
    ax.set_ylabel("relative importance")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .graph import make_graph
    rng = np.random.default_rng(stage_seed(args.seed, "gradcheck"))
    results = []
    for trial in range(args.trials):
        n = int(rng.integers(4, 13))
        edges = [(i, j, rng.normal(size=3))
                 for i in range(n) for j in range(i + 1, n)
                 if rng.random() < 0.5]
        g = make_graph(rng.normal(size=(n, cfg.model.d0)), edges,
                       f"t{trial}", int(rng.integers(2)))
        model = GNNModel(cfg.model, seed=int(rng.integers(2 ** 31)))
        batch = GraphBatch([g])
        worst = 0.0
        for name, t in model.params.items():
            rep = finite_difference_check(lambda _: loss(model, batch), t)
            worst = max(worst, rep["max_rel_error"])
        x = Tensor(batch.x.copy(), requires_grad=True)
        rep = finite_difference_check(lambda xt: loss(model, batch, x=xt), x)
        worst = max(worst, rep["max_rel_error"])
        results.append({"trial": trial, "n_nodes": n, "max_rel_error": worst})
    overall = max(r["max_rel_error"] for r in results)
    _dump({"trials": results, "max_rel_error": overall,
           "param_count": param_count(GNNModel(cfg.model))},
          os.path.join(args.out, "gradcheck.json"))
    return 0 if overall < 1e-5 else 1


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="braingnn")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
        "decompose": cmd_decompose, "interpret": cmd_interpret,
        "explain": cmd_explain, "gradcheck": cmd_gradcheck,
    }
    for name, fn in commands.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="out")
        p.add_argument("--rank", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--fold", type=int, default=None)
        p.add_argument("--trials", type=int, default=10)
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is None:
            args.seed = cfg.seed
        os.makedirs(args.out, exist_ok=True)
        return args.fn(cfg, args)
    except ConfigError as e:
        json.dump({"error": "config", "detail": str(e)}, sys.stdout)
        print()
        return 2
    except OSError as e:
        json.dump({"error": "io", "detail": str(e)}, sys.stdout)
        print()
        return 3


if __name__ == "__main__":
    sys.exit(main())
