"""Attributed multigraph data model: normalization, sparsification, slicing.

Graphs are node- and edge-attributed undirected multigraphs. Every value is
immutable after construction; all operations here are pure functions that
return new objects.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

NODE_ATTR_DIM = 10
EDGE_ATTR_DIM = 3

NODE_ATTR_NAMES = (
    "degree", "beta1", "beta2", "beta3", "beta4",
    "tf_mean", "tf_std", "x", "y", "z",
)
EDGE_ATTR_NAMES = ("pearson", "partial", "dist_kernel")

# edge attribute column holding the partial correlation
PARTIAL_COL = 1


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class BrainGraph:
    """Undirected attributed multigraph for one instance.

    node_attrs: (N, D) float array.
    edge_index: (E, 2) int array, each row (i, j) with i < j, stored once
        and interpreted symmetrically.
    edge_attr:  (E, F) float array aligned with edge_index.
    """
    node_attrs: np.ndarray
    edge_index: np.ndarray
    edge_attr: np.ndarray
    subject_id: str
    label: int

    @property
    def n_nodes(self) -> int:
        return self.node_attrs.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_index.shape[0]

    def validate(self) -> None:
        v = np.asarray(self.node_attrs)
        ei = np.asarray(self.edge_index)
        ea = np.asarray(self.edge_attr)
        n = v.shape[0]
        if n < 1 or v.ndim != 2:
            raise GraphError(f"node_attrs must be (N>=1, D), got {v.shape}")
        if ei.shape != (ea.shape[0], 2) or ea.ndim != 2:
            raise GraphError("edge_index/edge_attr shape mismatch")
        if self.label not in (0, 1):
            raise GraphError(f"label must be 0 or 1, got {self.label}")
        if ei.size:
            if ei.min() < 0 or ei.max() >= n:
                raise GraphError("edge endpoint out of range")
            if np.any(ei[:, 0] >= ei[:, 1]):
                raise GraphError("edges must satisfy i < j (no self loops)")

    def edge_attr_between(self, i: int, j: int) -> np.ndarray | None:
        """Symmetric attribute lookup: (i, j) and (j, i) are the same edge."""
        a, b = (i, j) if i < j else (j, i)
        mask = (self.edge_index[:, 0] == a) & (self.edge_index[:, 1] == b)
        rows = np.flatnonzero(mask)
        if rows.size == 0:
            return None
        return self.edge_attr[rows[0]].copy()


def make_graph(node_attrs, edges, subject_id="", label=0) -> BrainGraph:
    """Build a BrainGraph from an edge list of (i, j, attrs) tuples,
    normalizing endpoint order to i < j."""
    node_attrs = np.array(node_attrs, dtype=np.float64)
    if len(edges):
        idx = np.array([[min(i, j), max(i, j)] for i, j, _ in edges], dtype=np.int64)
        attr = np.array([np.asarray(a, dtype=np.float64) for _, _, a in edges])
    else:
        idx = np.zeros((0, 2), dtype=np.int64)
        attr = np.zeros((0, EDGE_ATTR_DIM))
    g = BrainGraph(node_attrs, idx, attr, subject_id, int(label))
    g.validate()
    return g


@dataclass(frozen=True)
class SubGraphIndex:
    """Strictly increasing node indices into a parent graph."""
    node_indices: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.node_indices)
        if len(idx) == 0:
            raise GraphError("empty sub-graph index")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise GraphError("indices must be strictly increasing")
        object.__setattr__(self, "node_indices", idx)


@dataclass(frozen=True)
class BoxCoxParams:
    """Per-column power-transform parameters plus z-scoring statistics.

    lam:  fitted power per column
    shift: additive offset making training values positive
    mean/std: post-transform statistics for z-scoring
    train_min: smallest raw training value (clamp target for out-of-support data)
    constant: flag for degenerate (constant) columns, left untouched
    """
    lam: np.ndarray
    shift: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    train_min: np.ndarray
    constant: np.ndarray

    @property
    def n_cols(self) -> int:
        return self.lam.shape[0]

    def to_dict(self) -> dict:
        return {
            "lam": self.lam.tolist(),
            "shift": self.shift.tolist(),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "train_min": self.train_min.tolist(),
            "constant": [bool(c) for c in self.constant],
        }

    @staticmethod
    def from_dict(d: dict) -> "BoxCoxParams":
        return BoxCoxParams(
            lam=np.array(d["lam"], dtype=np.float64),
            shift=np.array(d["shift"], dtype=np.float64),
            mean=np.array(d["mean"], dtype=np.float64),
            std=np.array(d["std"], dtype=np.float64),
            train_min=np.array(d["train_min"], dtype=np.float64),
            constant=np.array(d["constant"], dtype=bool),
        )


@dataclass
class GraphDataset:
    graphs: list
    boxcox: BoxCoxParams | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def node_dim(self) -> int:
        return self.graphs[0].node_attrs.shape[1]

    def stacked_node_attrs(self) -> np.ndarray:
        return np.concatenate([g.node_attrs for g in self.graphs], axis=0)

    def subset(self, indices) -> "GraphDataset":
        return GraphDataset([self.graphs[i] for i in indices],
                            boxcox=self.boxcox, meta=dict(self.meta))


# ---------------------------------------------------------------------------
# Box-Cox normalization

_LAM_GRID = np.round(np.arange(-2.0, 2.0 + 1e-9, 0.01), 2)
_POS_EPS = 1e-6


def _boxcox_transform(x: np.ndarray, lam: float) -> np.ndarray:
    if lam == 0.0:
        return np.log(x)
    return (np.power(x, lam) - 1.0) / lam


def _profile_loglik(x: np.ndarray, lam: float) -> float:
    y = _boxcox_transform(x, lam)
    var = y.var()
    if var <= 0 or not np.isfinite(var):
        return -np.inf
    n = x.shape[0]
    return (lam - 1.0) * np.log(x).sum() - 0.5 * n * np.log(var)


def boxcox_fit(train: GraphDataset) -> BoxCoxParams:
    """Fit per-column power transforms by profile log-likelihood grid search.

    Constant columns get an identity transform (std treated as 1) and are
    flagged; they pass through boxcox_apply unchanged.
    """
    if len(train) == 0:
        raise GraphError("training set is empty")
    X = train.stacked_node_attrs()
    D = X.shape[1]
    lam = np.ones(D)
    shift = np.zeros(D)
    mean = np.zeros(D)
    std = np.ones(D)
    tmin = np.zeros(D)
    const = np.zeros(D, dtype=bool)
    for d in range(D):
        col = X[:, d]
        tmin[d] = col.min()
        if np.unique(col).size < 2:
            const[d] = True
            continue
        delta = max(0.0, _POS_EPS - col.min())
        pos = col + delta
        best_lam, best_ll = 1.0, -np.inf
        for cand in _LAM_GRID:
            ll = _profile_loglik(pos, float(cand))
            if ll > best_ll:
                best_ll, best_lam = ll, float(cand)
        y = _boxcox_transform(pos, best_lam)
        lam[d] = best_lam
        shift[d] = delta
        mean[d] = y.mean()
        std[d] = y.std()
        if std[d] <= 0:
            const[d] = True
            lam[d], shift[d], mean[d], std[d] = 1.0, 0.0, 0.0, 1.0
    return BoxCoxParams(lam, shift, mean, std, tmin, const)


def boxcox_apply(ds: GraphDataset, p: BoxCoxParams) -> GraphDataset:
    """Transform and z-score every column of every graph with fitted params.

    Values below the training support (x + shift <= 0) are clamped to the
    smallest training value; the clamp count is recorded in meta.
    """
    if ds.node_dim != p.n_cols:
        raise GraphError(f"column count mismatch: data {ds.node_dim}, params {p.n_cols}")
    clamped = 0
    out = []
    for g in ds.graphs:
        V = g.node_attrs.copy()
        for d in range(p.n_cols):
            if p.constant[d]:
                continue
            col = V[:, d]
            low = col + p.shift[d] <= 0
            if np.any(low):
                clamped += int(low.sum())
                col = np.where(low, p.train_min[d], col)
            y = _boxcox_transform(col + p.shift[d], p.lam[d])
            V[:, d] = (y - p.mean[d]) / p.std[d]
        out.append(replace(g, node_attrs=V))
    meta = dict(ds.meta)
    meta["boxcox_clamped"] = clamped
    return GraphDataset(out, boxcox=p, meta=meta)


# ---------------------------------------------------------------------------
# Sparsification, slicing, degree

def sparsify_edges(g: BrainGraph, percentile: float = 95.0) -> BrainGraph:
    """Keep the edges at or above the given percentile of partial correlation.

    The threshold is the value of the k-th largest partial correlation with
    k = ceil((1 - percentile/100) * E); all ties at the threshold are kept.
    """
    if g.n_edges < 1:
        raise GraphError("graph has no edges to sparsify")
    if not (0 <= percentile < 100):
        raise GraphError(f"percentile must be in [0, 100), got {percentile}")
    vals = g.edge_attr[:, PARTIAL_COL]
    k = int(np.ceil((100.0 - percentile) * vals.size / 100.0 - 1e-9))
    k = max(k, 1)
    threshold = np.sort(vals)[::-1][k - 1]
    keep = vals >= threshold
    return replace(g, edge_index=g.edge_index[keep].copy(),
                   edge_attr=g.edge_attr[keep].copy())


def slice_subgraph(g: BrainGraph, idx: SubGraphIndex) -> BrainGraph:
    """Restrict a graph to the given nodes, keeping edges with both endpoints
    inside and renumbering them by rank within the index."""
    nodes = np.asarray(idx.node_indices, dtype=np.int64)
    if nodes[-1] >= g.n_nodes:
        raise GraphError("sub-graph index out of range")
    remap = -np.ones(g.n_nodes, dtype=np.int64)
    remap[nodes] = np.arange(nodes.size)
    if g.n_edges:
        keep = (remap[g.edge_index[:, 0]] >= 0) & (remap[g.edge_index[:, 1]] >= 0)
        new_idx = remap[g.edge_index[keep]]
        new_attr = g.edge_attr[keep].copy()
    else:
        new_idx = np.zeros((0, 2), dtype=np.int64)
        new_attr = g.edge_attr[:0].copy()
    return replace(g, node_attrs=g.node_attrs[nodes].copy(),
                   edge_index=new_idx, edge_attr=new_attr)


def degree_feature(g: BrainGraph) -> np.ndarray:
    """Per-node count of incident retained edges."""
    deg = np.zeros(g.n_nodes, dtype=np.float64)
    if g.n_edges:
        np.add.at(deg, g.edge_index[:, 0], 1.0)
        np.add.at(deg, g.edge_index[:, 1], 1.0)
    return deg


def with_degree_feature(g: BrainGraph) -> BrainGraph:
    """Write the degree vector into node-attribute column 0."""
    V = g.node_attrs.copy()
    V[:, 0] = degree_feature(g)
    return replace(g, node_attrs=V)


def preprocess_graphs(graphs, percentile: float = 95.0) -> list:
    """Sparsify and recompute the degree column for every graph."""
    return [with_degree_feature(sparsify_edges(g, percentile)) for g in graphs]


# ---------------------------------------------------------------------------
# Dataset JSON serialization

def dataset_to_dict(ds: GraphDataset) -> dict:
    return {
        "meta": ds.meta,
        "graphs": [
            {
                "subject_id": g.subject_id,
                "label": int(g.label),
                "nodes": g.node_attrs.tolist(),
                "edges": [
                    [int(i), int(j), a.tolist()]
                    for (i, j), a in zip(g.edge_index, g.edge_attr)
                ],
            }
            for g in ds.graphs
        ],
    }


def dataset_from_dict(d: dict) -> GraphDataset:
    graphs = []
    for gd in d["graphs"]:
        g = make_graph(gd["nodes"], [(i, j, a) for i, j, a in gd["edges"]],
                       subject_id=gd["subject_id"], label=gd["label"])
        graphs.append(g)
    return GraphDataset(graphs, meta=dict(d.get("meta", {})))


def save_dataset(ds: GraphDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(dataset_to_dict(ds), f)


def load_dataset(path) -> GraphDataset:
    with open(path, encoding="utf-8") as f:
        return dataset_from_dict(json.load(f))
