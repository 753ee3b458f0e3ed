"""Edge-conditioned GNN classifier: two conv-pool blocks, mean/max readout
per block, concatenated summary, MLP head with softmax output.

Convolution (per node i):
    v_i' = 1/(|N(i)|+1) * relu(Theta v_i + sum_{j in N(i)} h(e_ij) v_j)
where h maps the 3 edge attributes to a d_out x d_in matrix (affine by
default, optional hidden layer).

Pooling: score y = V w / ||w||, keep the k = ceil(r*N) highest-scoring nodes
(ties broken by lower original index), gate kept rows by tanh(y), and slice
the edge set to the survivors.

Graphs are processed as one block-diagonal batch so training amortizes tape
overhead; model_forward is the single-graph view of the same path.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import BrainGraph, GraphError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d0: int = 10
    d1: int = 16
    d2: int = 8
    pool_ratio: float = 0.5
    edge_dim: int = 3
    head_hidden: int = 16
    reg_weight: float = 0.001
    edge_hidden: int = 0  # 0 = plain affine edge map

    def __post_init__(self):
        if not (0 < self.pool_ratio <= 1):
            raise ValueError(f"pool_ratio must be in (0, 1], got {self.pool_ratio}")
        for name in ("d0", "d1", "d2", "head_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def summary_dim(self) -> int:
        return 2 * self.d1 + 2 * self.d2


def _glorot(rng, fan_out, fan_in, shape=None):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_out, fan_in) if shape is None else shape
    return rng.uniform(-lim, lim, size=shape)


class GNNModel:
    """Parameter container plus the forward pass. Parameters live in an
    ordered name -> Tensor dict so the trainer can treat them uniformly."""

    def __init__(self, config: ModelConfig, seed: int = 0, params=None):
        self.config = config
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        c = config
        p = {}
        for l, (din, dout) in enumerate(((c.d0, c.d1), (c.d1, c.d2)), start=1):
            p[f"conv{l}.theta"] = _glorot(rng, dout, din)
            if c.edge_hidden > 0:
                p[f"conv{l}.edge_w1"] = _glorot(rng, c.edge_hidden, c.edge_dim,
                                                (c.edge_dim, c.edge_hidden))
                p[f"conv{l}.edge_b1"] = np.zeros(c.edge_hidden)
                p[f"conv{l}.edge_w2"] = _glorot(rng, dout * din, c.edge_hidden,
                                                (c.edge_hidden, dout * din))
            else:
                p[f"conv{l}.edge_w2"] = _glorot(rng, dout * din, c.edge_dim,
                                                (c.edge_dim, dout * din))
            p[f"conv{l}.edge_b2"] = np.zeros(dout * din)
            w = rng.normal(size=dout)
            p[f"pool{l}.w"] = w / np.linalg.norm(w)
        p["head.w1"] = _glorot(rng, c.head_hidden, c.summary_dim)
        p["head.b1"] = np.zeros(c.head_hidden)
        p["head.w2"] = _glorot(rng, 2, c.head_hidden)
        p["head.b2"] = np.zeros(2)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config": asdict(self.config),
            "params": [
                {"name": k, "shape": list(t.shape), "data": t.data.ravel().tolist()}
                for k, t in self.params.items()
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "GNNModel":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format: {d.get('format_version')}")
        cfg = ModelConfig(**d["config"])
        params = {
            e["name"]: Tensor(np.array(e["data"]).reshape(e["shape"]),
                              requires_grad=True)
            for e in d["params"]
        }
        return GNNModel(cfg, params=params)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f)

    @staticmethod
    def load(path) -> "GNNModel":
        with open(path, encoding="utf-8") as f:
            return GNNModel.from_dict(json.load(f))

    def copy(self) -> "GNNModel":
        params = {k: Tensor(t.data.copy(), requires_grad=True)
                  for k, t in self.params.items()}
        return GNNModel(self.config, params=params)


def param_count(m: GNNModel) -> int:
    return sum(t.data.size for t in m.params.values())


def param_count_closed_form(c: ModelConfig) -> int:
    """Trainable-scalar count from the architecture config alone."""
    total = 0
    for din, dout in ((c.d0, c.d1), (c.d1, c.d2)):
        total += dout * din  # theta
        if c.edge_hidden > 0:
            total += c.edge_dim * c.edge_hidden + c.edge_hidden
            total += c.edge_hidden * dout * din
        else:
            total += c.edge_dim * dout * din
        total += dout * din  # edge map bias
        total += dout  # pooling vector
    total += c.summary_dim * c.head_hidden + c.head_hidden
    total += c.head_hidden * 2 + 2
    return total


# ---------------------------------------------------------------------------
# batched graph structure

class GraphBatch:
    """Block-diagonal stack of graphs: node features plus directed edge
    arrays (each undirected edge stored in both directions)."""

    def __init__(self, graphs):
        if not graphs:
            raise GraphError("empty batch")
        xs, srcs, dsts, attrs, segs = [], [], [], [], []
        offset = 0
        for gi, g in enumerate(graphs):
            xs.append(g.node_attrs)
            if g.n_edges:
                i = g.edge_index[:, 0] + offset
                j = g.edge_index[:, 1] + offset
                srcs.append(np.concatenate([i, j]))
                dsts.append(np.concatenate([j, i]))
                attrs.append(np.concatenate([g.edge_attr, g.edge_attr]))
            segs.append(np.full(g.n_nodes, gi, dtype=np.int64))
            offset += g.n_nodes
        self.x = np.concatenate(xs, axis=0)
        self.seg = np.concatenate(segs)
        self.n_graphs = len(graphs)
        self.labels = np.array([g.label for g in graphs], dtype=np.int64)
        if srcs:
            self.src = np.concatenate(srcs)
            self.dst = np.concatenate(dsts)
            self.edge_attr = np.concatenate(attrs, axis=0)
        else:
            self.src = np.zeros(0, dtype=np.int64)
            self.dst = np.zeros(0, dtype=np.int64)
            self.edge_attr = np.zeros((0, graphs[0].edge_attr.shape[1]))


def _conv(m: GNNModel, layer: int, x: Tensor, edge_attr: np.ndarray,
          src, dst, n_nodes: int, din: int, dout: int) -> Tensor:
    p = m.params
    theta = p[f"conv{layer}.theta"]
    self_term = ad.matmul(x, theta_t(theta))
    if src.size:
        ea = Tensor(edge_attr)
        if m.config.edge_hidden > 0:
            h = ad.relu(ad.add(ad.matmul(ea, p[f"conv{layer}.edge_w1"]),
                               p[f"conv{layer}.edge_b1"]))
            flat = ad.add(ad.matmul(h, p[f"conv{layer}.edge_w2"]),
                          p[f"conv{layer}.edge_b2"])
        else:
            flat = ad.add(ad.matmul(ea, p[f"conv{layer}.edge_w2"]),
                          p[f"conv{layer}.edge_b2"])
        mats = ad.reshape(flat, (src.size, dout, din))
        msgs = ad.edge_matvec(mats, ad.gather_rows(x, src))
        agg = ad.scatter_add(msgs, dst, n_nodes)
        pre = ad.add(self_term, agg)
    else:
        pre = self_term
    deg = np.bincount(dst, minlength=n_nodes).astype(np.float64)
    inv = 1.0 / (deg + 1.0)
    return ad.mul(ad.relu(pre), Tensor(inv[:, None]))


def theta_t(theta: Tensor) -> Tensor:
    """Transpose view of a (dout, din) parameter for right-multiplication."""
    t = Tensor(theta.data.T)

    def backward(g):
        ad._accumulate(theta, g.T)
    if theta.requires_grad:
        t.requires_grad = True
        t._parents = (theta,)
        t._backward = backward
    return t


def _pool(m: GNNModel, layer: int, x: Tensor, src, dst, edge_attr, seg,
          ratio: float):
    """Top-k pooling over a batch; k = ceil(ratio * n) per graph."""
    w = m.params[f"pool{layer}.w"]
    wn = float(np.linalg.norm(w.data))
    if wn == 0:
        raise GraphError(f"pool{layer}: zero projection vector")
    y = ad.div(ad.reshape(ad.matmul(x, ad.reshape(w, (w.shape[0], 1))), (-1,)),
               ad.norm(w))
    # per-graph top-k selection on the score values (bookkeeping, not taped)
    yv = y.data
    n_graphs = int(seg[-1]) + 1 if seg.size else 0
    counts = np.bincount(seg, minlength=n_graphs)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    sel = []
    for g in range(n_graphs):
        lo, n = starts[g], counts[g]
        k = max(1, math.ceil(ratio * n))
        local = np.lexsort((np.arange(n), -yv[lo:lo + n]))[:k]
        sel.append(lo + local)
    sel = np.concatenate(sel)

    gated = ad.mul(x, ad.reshape(ad.tanh(y), (-1, 1)))
    x_out = ad.gather_rows(gated, sel)

    remap = -np.ones(x.shape[0], dtype=np.int64)
    remap[sel] = np.arange(sel.size)
    if src.size:
        keep = (remap[src] >= 0) & (remap[dst] >= 0)
        src_out, dst_out = remap[src[keep]], remap[dst[keep]]
        attr_out = edge_attr[keep]
    else:
        src_out, dst_out, attr_out = src, dst, edge_attr
    return x_out, src_out, dst_out, attr_out, seg[sel], y, sel


def batch_forward(m: GNNModel, batch: GraphBatch, x: Tensor | None = None) -> Tensor:
    """Class probabilities, one row per graph in the batch.

    Pass x (a requires_grad copy of batch.x) to obtain input gradients.
    """
    c = m.config
    if batch.x.shape[1] != c.d0:
        raise GraphError(f"node attribute width {batch.x.shape[1]} != d0 {c.d0}")
    x = Tensor(batch.x) if x is None else x
    src, dst, ea, seg = batch.src, batch.dst, batch.edge_attr, batch.seg
    G = batch.n_graphs

    h1 = _conv(m, 1, x, ea, src, dst, batch.x.shape[0], c.d0, c.d1)
    h1p, src, dst, ea, seg, _, _ = _pool(m, 1, h1, src, dst, ea, seg, c.pool_ratio)
    s1 = ad.concat([ad.segment_mean(h1p, seg, G), ad.segment_max(h1p, seg, G)],
                   axis=1)

    h2 = _conv(m, 2, h1p, ea, src, dst, h1p.shape[0], c.d1, c.d2)
    h2p, src, dst, ea, seg, _, _ = _pool(m, 2, h2, src, dst, ea, seg, c.pool_ratio)
    s2 = ad.concat([ad.segment_mean(h2p, seg, G), ad.segment_max(h2p, seg, G)],
                   axis=1)

    s = ad.concat([s1, s2], axis=1)
    p = m.params
    hidden = ad.relu(ad.add(ad.matmul(s, theta_t(p["head.w1"])), p["head.b1"]))
    logits = ad.add(ad.matmul(hidden, theta_t(p["head.w2"])), p["head.b2"])
    return ad.softmax(logits)


def nnconv_forward(m: GNNModel, layer: int, nodes: np.ndarray,
                   edge_index: np.ndarray, edge_attr: np.ndarray) -> np.ndarray:
    """Single-graph edge-conditioned convolution (values only)."""
    din, dout = ((m.config.d0, m.config.d1), (m.config.d1, m.config.d2))[layer - 1]
    n = nodes.shape[0]
    if edge_index.shape[0]:
        src = np.concatenate([edge_index[:, 0], edge_index[:, 1]])
        dst = np.concatenate([edge_index[:, 1], edge_index[:, 0]])
        ea = np.concatenate([edge_attr, edge_attr], axis=0)
    else:
        src = dst = np.zeros(0, dtype=np.int64)
        ea = np.zeros((0, m.config.edge_dim))
    return _conv(m, layer, Tensor(nodes), ea, src, dst, n, din, dout).data


def topk_pool(w: np.ndarray, nodes: np.ndarray, edge_index: np.ndarray,
              edge_attr: np.ndarray, k: int):
    """Single-graph top-k pooling (values only).

    Returns (pooled nodes, edge_index, edge_attr, scores y, chosen indices).
    Rows come out in descending score order, ties broken by lower index.
    """
    n = nodes.shape[0]
    if not (1 <= k <= n):
        raise GraphError(f"k={k} out of range for {n} nodes")
    wn = np.linalg.norm(w)
    if wn == 0:
        raise GraphError("zero projection vector")
    y = nodes @ w / wn
    sel = np.lexsort((np.arange(n), -y))[:k]
    pooled = nodes[sel] * np.tanh(y[sel])[:, None]
    remap = -np.ones(n, dtype=np.int64)
    remap[sel] = np.arange(k)
    if edge_index.shape[0]:
        keep = (remap[edge_index[:, 0]] >= 0) & (remap[edge_index[:, 1]] >= 0)
        ei = remap[edge_index[keep]]
        ea = edge_attr[keep]
    else:
        ei, ea = edge_index, edge_attr
    return pooled, ei, ea, y, sel


def readout(nodes: np.ndarray) -> np.ndarray:
    """Columnwise mean then columnwise max, concatenated."""
    if nodes.shape[0] < 1:
        raise GraphError("readout needs at least one node")
    return np.concatenate([nodes.mean(axis=0), nodes.max(axis=0)])


def model_forward(m: GNNModel, g: BrainGraph) -> tuple:
    """Class probabilities (p_hc, p_asd) for one graph."""
    probs = batch_forward(m, GraphBatch([g]))
    return float(probs.data[0, 0]), float(probs.data[0, 1])


def regularization(m: GNNModel) -> Tensor:
    """lambda * sum_l (||w_l|| - 1)^2, pushing pool projections to unit norm."""
    terms = []
    for layer in (1, 2):
        d = ad.sub(ad.norm(m.params[f"pool{layer}.w"]), Tensor(1.0))
        terms.append(ad.mul(d, d))
    return ad.scale(ad.add(terms[0], terms[1]), m.config.reg_weight)


def loss(m: GNNModel, batch: GraphBatch, x: Tensor | None = None) -> Tensor:
    """Mean cross-entropy over the batch plus the pooling regularizer."""
    probs = batch_forward(m, batch, x=x)
    picked = ad.gather_pairs(probs, np.arange(batch.n_graphs), batch.labels)
    ce = ad.scale(ad.reduce_mean(ad.log(picked)), -1.0)
    return ad.add(ce, regularization(m))


def loss_on_graphs(m: GNNModel, graphs) -> Tensor:
    return loss(m, GraphBatch(graphs))


def predict(m: GNNModel, graphs, batch_size: int = 64) -> np.ndarray:
    """Positive-class probability per graph, without gradient tracking."""
    out = []
    for lo in range(0, len(graphs), batch_size):
        probs = batch_forward(m, GraphBatch(graphs[lo:lo + batch_size]))
        out.append(probs.data[:, 1])
    return np.concatenate(out)
