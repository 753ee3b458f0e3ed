"""Adam training with stepped learning-rate decay, subject-level k-fold
splitting, and the four evaluation metrics (positive class = label 1)."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .graph import GraphDataset, GraphError, boxcox_apply, boxcox_fit, preprocess_graphs
from .model import GNNModel, GraphBatch, loss, predict


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    decay_factor: float = 10.0
    decay_every: int = 50
    epochs: int = 300
    reg_weight: float = 0.001
    batch_size: int = 16
    seed: int = 0
    folds: int = 5

    def __post_init__(self):
        if min(self.lr0, self.decay_factor, self.decay_every,
               self.batch_size, self.folds) <= 0 or self.epochs < 0:
            raise ValueError("train config values must be positive")


@dataclass
class Metrics:
    accuracy: float
    f_score: float
    precision: float
    recall: float

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "f_score": self.f_score,
                "precision": self.precision, "recall": self.recall}


class AdamState:
    """Bias-corrected Adam accumulators for a named parameter dict."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}


def adam_step(state: AdamState, params, grads, lr: float) -> bool:
    """One elementwise Adam update. Returns False (no update) if any
    gradient is non-finite."""
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            return False
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for k, p in params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = state.m[k] / (1 - b1 ** t)
        vhat = state.v[k] / (1 - b2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return True


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr0 * cfg.decay_factor ** (-(epoch // cfg.decay_every))


def kfold_split(ds: GraphDataset, folds: int, seed: int):
    """Partition graphs into folds by subject so all copies of a subject land
    together. Returns [(train_indices, test_indices)] per fold."""
    by_subject = {}
    for i, g in enumerate(ds.graphs):
        by_subject.setdefault(g.subject_id, []).append(i)
    subjects = sorted(by_subject)
    if len(subjects) < folds:
        raise GraphError(f"{len(subjects)} subjects cannot fill {folds} folds")
    order = np.random.default_rng(seed).permutation(len(subjects))
    assignment = {subjects[s]: f for f, s in
                  ((i % folds, order[i]) for i in range(len(subjects)))}
    splits = []
    for f in range(folds):
        test = [i for s in subjects if assignment[s] == f for i in by_subject[s]]
        train = [i for s in subjects if assignment[s] != f for i in by_subject[s]]
        splits.append((sorted(train), sorted(test)))
    return splits


def evaluate(m: GNNModel, graphs) -> Metrics:
    if not graphs:
        raise GraphError("empty evaluation set")
    p1 = predict(m, graphs)
    pred = (p1 >= 0.5).astype(int)
    true = np.array([g.label for g in graphs])
    return metrics_from_predictions(true, pred)


def metrics_from_predictions(true: np.ndarray, pred: np.ndarray) -> Metrics:
    tp = int(np.sum((pred == 1) & (true == 1)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    acc = float(np.mean(pred == true))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics(acc, f, precision, recall)


def train(m: GNNModel, train_graphs, cfg: TrainConfig, log_path=None):
    """Run the full schedule on preprocessed (sparsified, normalized) graphs.

    Returns (model, per-epoch log rows). On a non-finite loss the run aborts
    and the last finished epoch's parameters are restored.
    """
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(m.params)
    log = []
    n = len(train_graphs)
    checkpoint = {k: t.data.copy() for k, t in m.params.items()}
    diverged = False
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg, epoch)
        order = rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, cfg.batch_size):
            batch = GraphBatch([train_graphs[i] for i in order[lo:lo + cfg.batch_size]])
            for t in m.params.values():
                t.zero_grad()
            out = loss(m, batch)
            lv = float(out.data)
            if not np.isfinite(lv):
                diverged = True
                break
            out.backward()
            # parameters that did not participate (e.g. all edges pooled
            # away before a conv layer) have no gradient -> zero update
            grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data)
                     for k, t in m.params.items()}
            adam_step(state, m.params, grads, lr)
            epoch_losses.append(lv)
        if diverged:
            for k, t in m.params.items():
                t.data[...] = checkpoint[k]
            break
        checkpoint = {k: t.data.copy() for k, t in m.params.items()}
        met = evaluate(m, train_graphs)
        log.append({"epoch": epoch, "lr": lr,
                    "loss": float(np.mean(epoch_losses)) if epoch_losses else 0.0,
                    "acc": met.accuracy, "f1": met.f_score,
                    "precision": met.precision, "recall": met.recall})
    if log_path is not None:
        write_log(log, log_path)
    return m, log


def write_log(log, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "lr", "loss", "acc", "f1", "precision", "recall"])
        for row in log:
            writer.writerow([row["epoch"], repr(row["lr"]), repr(row["loss"]),
                             repr(row["acc"]), repr(row["f1"]),
                             repr(row["precision"]), repr(row["recall"])])


def prepare_fold(ds: GraphDataset, train_idx, test_idx, percentile: float = 95.0):
    """Sparsify + degree, then Box-Cox fit on the training fold only and
    apply to both sides. Returns (train_graphs, test_graphs, params)."""
    train_graphs = preprocess_graphs([ds.graphs[i] for i in train_idx], percentile)
    test_graphs = preprocess_graphs([ds.graphs[i] for i in test_idx], percentile)
    train_ds = GraphDataset(train_graphs)
    params = boxcox_fit(train_ds)
    train_out = boxcox_apply(train_ds, params)
    test_out = boxcox_apply(GraphDataset(test_graphs), params)
    return train_out.graphs, test_out.graphs, params
