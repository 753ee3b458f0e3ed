"""Connectivity tensor construction and symmetric non-negative CP (PARAFAC)
decomposition via multiplicative updates, plus membership thresholding.

The tensor stacks each graph's sparsified partial-correlation matrix
(negatives clamped to zero, diagonal zero). The decomposition shares one
node factor across both node modes, so every rank-1 term is a_j x a_j x c_j.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .graph import GraphError, PARTIAL_COL

_EPS = 1e-12


@dataclass
class CPFactors:
    rank: int
    A: np.ndarray          # N x R, unit-L2 columns
    C: np.ndarray          # S x R, unit-L2 columns
    lam: np.ndarray        # R scales, descending
    fit: float | None      # 1 - ||tau - tau_hat|| / ||tau||, None if degenerate
    degenerate: bool = False
    error_history: list | None = None  # relative error per accepted iteration

    def to_dict(self) -> dict:
        return {"rank": self.rank, "lambda": self.lam.tolist(),
                "A": self.A.tolist(), "C": self.C.tolist(),
                "fit": self.fit, "degenerate": self.degenerate}

    @staticmethod
    def from_dict(d: dict) -> "CPFactors":
        return CPFactors(rank=d["rank"], A=np.array(d["A"]), C=np.array(d["C"]),
                         lam=np.array(d["lambda"]), fit=d["fit"],
                         degenerate=d.get("degenerate", False))


@dataclass
class Community:
    index: int
    members: tuple         # sorted ascending node indices
    threshold: float
    mean_membership: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"j": self.index, "members": list(self.members),
                "threshold": self.threshold,
                "mean_membership": self.mean_membership,
                "degenerate": self.degenerate}


def build_tensor(graphs) -> np.ndarray:
    """Stack per-graph symmetric non-negative partial-correlation matrices
    into an N x N x S array."""
    if not graphs:
        raise GraphError("no graphs")
    n = graphs[0].n_nodes
    tau = np.zeros((n, n, len(graphs)))
    for s, g in enumerate(graphs):
        if g.n_nodes != n:
            raise GraphError(f"graph {s} has {g.n_nodes} nodes, expected {n}")
        if g.n_edges:
            vals = np.maximum(g.edge_attr[:, PARTIAL_COL], 0.0)
            i, j = g.edge_index[:, 0], g.edge_index[:, 1]
            tau[i, j, s] = vals
            tau[j, i, s] = vals
    return tau


def _reconstruct(A, C):
    return np.einsum("ir,jr,sr->ijs", A, A, C)


def _rel_error(tau_1, A, C, tau_norm):
    # mode-0 unfolding (C-order): row i, column j*S + s pairs with kr(A, C)
    return np.linalg.norm(tau_1 - A @ _khatri_rao(A, C).T) / tau_norm


def _update_c(tau_3, A, C):
    """Exact Lee-Seung multiplicative step on the graph factor; monotone
    non-increasing for the Frobenius objective with A fixed."""
    AtA = A.T @ A
    num = tau_3 @ _khatri_rao(A, A)
    den = C @ (AtA * AtA)
    return C * (num / np.maximum(den, _EPS))


def _update_a(tau_1, A, C, err_base, tau_norm):
    """Damped multiplicative step on the shared node factor.

    A appears in both node modes, so its subproblem is quartic and the plain
    ratio update can overshoot; A <- A * ((1-g) + g*num/den) with g halved
    until the error does not increase keeps non-negativity and monotonicity.
    """
    num = tau_1 @ _khatri_rao(A, C)
    den = A @ ((A.T @ A) * (C.T @ C))
    ratio = num / np.maximum(den, _EPS)
    gamma = 1.0
    while gamma >= 1e-6:
        A_try = A * ((1.0 - gamma) + gamma * ratio)
        new_err = _rel_error(tau_1, A_try, C, tau_norm)
        if new_err <= err_base:
            return A_try, new_err
        gamma *= 0.5
    return A, err_base


def _khatri_rao(X, Y):
    # columnwise Kronecker product: (I, R) x (J, R) -> (I*J, R)
    return (X[:, None, :] * Y[None, :, :]).reshape(X.shape[0] * Y.shape[0], -1)


def nncp_decompose(tau: np.ndarray, rank: int, iters: int = 500,
                   tol: float = 1e-8, seed: int = 0, restarts: int = 10) -> CPFactors:
    """Symmetric non-negative CP by multiplicative updates.

    Runs several seeded restarts and keeps the best fit. Within a restart,
    iterations that would increase the reconstruction error are damped by
    blending back toward the previous factors (convex blends preserve
    non-negativity), so accepted error is non-increasing by construction.
    """
    if rank < 1:
        raise GraphError(f"rank must be >= 1, got {rank}")
    if np.any(tau < 0):
        raise GraphError("tensor must be non-negative")
    n = tau.shape[0]
    s = tau.shape[2]
    tau_norm = np.linalg.norm(tau)
    if tau_norm == 0:
        return CPFactors(rank, np.zeros((n, rank)), np.zeros((s, rank)),
                         np.zeros(rank), fit=None, degenerate=True)
    tau_1 = _unfold(tau, 0)
    tau_3 = _unfold(tau, 2)
    root = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        rng = np.random.default_rng(root.integers(2 ** 63))
        scale = (tau_norm / np.sqrt(rank)) ** (1 / 3)
        A = rng.uniform(0.1, 1.0, size=(n, rank)) * scale / np.sqrt(n)
        C = rng.uniform(0.1, 1.0, size=(s, rank)) * scale / np.sqrt(s)
        err = _rel_error(tau_1, A, C, tau_norm)
        history = [err]
        for _ in range(iters):
            prev = err
            C = _update_c(tau_3, A, C)
            err = _rel_error(tau_1, A, C, tau_norm)
            A, err = _update_a(tau_1, A, C, err, tau_norm)
            history.append(err)
            if prev - err < tol * max(prev, 1e-30):
                break
        if best is None or err < best[0]:
            best = (err, A, C, history)
    err, A, C, history = best
    return _canonicalize(A, C, 1.0 - err, history)


def _unfold(tau, mode):
    return np.moveaxis(tau, mode, 0).reshape(tau.shape[mode], -1)


def _canonicalize(A, C, fit, history) -> CPFactors:
    a_norm = np.linalg.norm(A, axis=0)
    c_norm = np.linalg.norm(C, axis=0)
    lam = a_norm ** 2 * c_norm
    A = np.divide(A, a_norm, out=np.zeros_like(A), where=a_norm > 0)
    C = np.divide(C, c_norm, out=np.zeros_like(C), where=c_norm > 0)
    order = np.argsort(-lam, kind="stable")
    return CPFactors(rank=A.shape[1], A=A[:, order], C=C[:, order],
                     lam=lam[order], fit=fit, error_history=history)


def membership_threshold(f: CPFactors):
    """Node i joins community j iff A[i, j] > mean + population std of
    column j. Empty communities are flagged degenerate."""
    communities = []
    for j in range(f.rank):
        col = f.A[:, j]
        thr = col.mean() + col.std()
        members = tuple(int(i) for i in np.flatnonzero(col > thr))
        communities.append(Community(
            index=j, members=members, threshold=float(thr),
            mean_membership=float(col[list(members)].mean()) if members else 0.0,
            degenerate=not members))
    return communities


def save_factors(f: CPFactors, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(f.to_dict(), fh)


def save_communities(communities, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([c.to_dict() for c in communities], fh)


def load_communities(path):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return [Community(index=d["j"], members=tuple(d["members"]),
                      threshold=d["threshold"],
                      mean_membership=d["mean_membership"],
                      degenerate=d["degenerate"]) for d in data]
