"""Stage-2 interpretation: community ECC scoring, node importance
aggregation, and gradient-based node-attribute sensitivity.

ECC feeds each community's node slice of every training graph through the
trained classifier, Laplace-corrects the correct-class probability with
p <- (p*S + 1)/(S + 2), and averages tanh(log2(p/(1-p))). Positive scores
are evidence for the classifier, negative against it.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import GraphError, SubGraphIndex, slice_subgraph
from .model import GNNModel, GraphBatch, batch_forward


@dataclass
class ECCScore:
    community: int
    score: float
    contributions: np.ndarray  # per training instance

    def to_dict(self) -> dict:
        return {"community": self.community, "score": self.score,
                "contributions": self.contributions.tolist()}


@dataclass
class NodeImportance:
    scores: np.ndarray  # per node
    ranking: np.ndarray  # node indices, best first (ties by lower index)

    def to_dict(self) -> dict:
        return {"scores": self.scores.tolist(), "ranking": self.ranking.tolist()}


@dataclass
class AttributeImportance:
    raw: np.ndarray       # mean |d p(asd)/d attribute|, per column
    relative: np.ndarray  # raw / max(raw), zeros if all gradients vanish
    all_zero: bool
    excluded: int         # instances dropped for non-finite gradients

    def to_dict(self) -> dict:
        return {"raw": self.raw.tolist(), "relative": self.relative.tolist(),
                "all_zero": self.all_zero, "excluded": self.excluded}


def laplace_correct(p: np.ndarray, s: int) -> np.ndarray:
    return (p * s + 1.0) / (s + 2.0)


def ecc(m: GNNModel, communities, train_graphs) -> list:
    """Evidence-for-correct-class score per non-degenerate community."""
    s = len(train_graphs)
    if s < 1:
        raise GraphError("need at least one training graph")
    scores = []
    for com in communities:
        if com.degenerate:
            continue
        idx = SubGraphIndex(com.members)
        slices = [slice_subgraph(g, idx) for g in train_graphs]
        probs = batch_forward(m, GraphBatch(slices)).data
        labels = np.array([g.label for g in train_graphs])
        p = probs[np.arange(s), labels]
        p = laplace_correct(p, s)
        terms = np.tanh(np.log2(p / (1.0 - p)))
        scores.append(ECCScore(com.index, float(terms.mean()), terms))
    return scores


def node_importance(eccs, communities, n_nodes: int) -> NodeImportance:
    """score_k = sum over communities containing k of ECC_j / |members_j|."""
    by_index = {c.index: c for c in communities}
    scores = np.zeros(n_nodes)
    for e in eccs:
        members = by_index[e.community].members
        if not members:
            continue
        scores[list(members)] += e.score / len(members)
    ranking = np.lexsort((np.arange(n_nodes), -scores))
    return NodeImportance(scores, ranking)


def gradient_explanation(m: GNNModel, graphs, batch_size: int = 64) -> AttributeImportance:
    """Mean absolute gradient of p(class 1) with respect to each node
    attribute, averaged over nodes then over graphs."""
    d = graphs[0].node_attrs.shape[1]
    per_graph = []
    excluded = 0
    for lo in range(0, len(graphs), batch_size):
        chunk = graphs[lo:lo + batch_size]
        batch = GraphBatch(chunk)
        x = Tensor(batch.x.copy(), requires_grad=True)
        probs = batch_forward(m, batch, x=x)
        # graphs are independent, so summing p1 gives each graph its own grad
        root = ad.reduce_sum(ad.gather_pairs(probs, np.arange(len(chunk)),
                                             np.ones(len(chunk), dtype=np.int64)))
        root.backward()
        grads = np.abs(x.grad)
        for gi in range(len(chunk)):
            rows = grads[batch.seg == gi]
            if not np.all(np.isfinite(rows)):
                excluded += 1
                continue
            per_graph.append(rows.mean(axis=0))
    raw = np.mean(per_graph, axis=0) if per_graph else np.zeros(d)
    top = raw.max()
    if top > 0:
        return AttributeImportance(raw, raw / top, False, excluded)
    return AttributeImportance(raw, np.zeros_like(raw), True, excluded)


def top_communities_by_ecc(eccs, count: int = 2):
    return sorted(eccs, key=lambda e: (-e.score, e.community))[:count]


def community_union(communities, eccs, count: int = 2) -> SubGraphIndex:
    by_index = {c.index: c for c in communities}
    members = set()
    for e in top_communities_by_ecc(eccs, count):
        members.update(by_index[e.community].members)
    if not members:
        raise GraphError("union of top communities is empty")
    return SubGraphIndex(tuple(sorted(members)))


def subgraph_retrain_check(union_idx: SubGraphIndex, train_graphs, test_graphs,
                           model_config, train_config):
    """Retrain a fresh model on the top communities' node slices and report
    its test metrics next to the full-graph model's input data."""
    from .training import evaluate, train  # local import to avoid a cycle

    sliced_train = [slice_subgraph(g, union_idx) for g in train_graphs]
    sliced_test = [slice_subgraph(g, union_idx) for g in test_graphs]
    fresh = GNNModel(model_config, seed=train_config.seed)
    fresh, _ = train(fresh, sliced_train, train_config)
    return evaluate(fresh, sliced_test)


def write_report(eccs, communities, importance: NodeImportance,
                 csv_path=None, json_path=None) -> None:
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["roi_index", "score", "rank"])
            rank_of = {int(n): r for r, n in enumerate(importance.ranking)}
            for node in range(len(importance.scores)):
                writer.writerow([node, repr(float(importance.scores[node])),
                                 rank_of[node]])
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump({
                "communities": [c.to_dict() for c in communities],
                "ecc": [e.to_dict() for e in eccs],
                "node_importance": importance.to_dict(),
            }, f)
