"""Clustering and sparsity weights, distances and the smoothed absolute value."""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from . import _kernels
from .blockmodel import BlockParameters, ClusterAssignment

__all__ = [
    "DegenerateInputError",
    "PenaltyConfig",
    "regularized_inverse",
    "pairwise_distance",
    "squared_distance_matrix",
    "knn_edges",
    "mst_repair",
    "build_weights",
    "default_sparsity_weights",
    "fusion_threshold",
    "cluster_distance",
    "aggregate_weight",
    "smoothed_abs",
    "n_components",
    "read_triplets",
    "write_triplets",
]


class DegenerateInputError(ValueError):
    """Raised for inputs on which weights cannot be computed."""


@dataclass(frozen=True)
class PenaltyConfig:
    """Weights and tuning parameters of the penalized likelihood.

    ``lambda_c`` multiplies the clusterpath penalty as written in the
    objective; the path computation passes the rescaled value here.
    """

    W: np.ndarray
    Z: np.ndarray
    lambda_c: float = 0.0
    lambda_s: float = 0.0
    phi: float = 1.0
    knn: int = 5
    epsilon_abs: float = 5e-3

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float)
        Z = np.asarray(self.Z, dtype=float)
        for name, M in (("W", W), ("Z", Z)):
            if M.ndim != 2 or M.shape[0] != M.shape[1]:
                raise ValueError(f"{name} must be square")
            if not np.allclose(M, M.T, atol=0.0):
                raise ValueError(f"{name} must be symmetric")
            if np.any(np.diag(M) != 0.0):
                raise ValueError(f"{name} must have a zero diagonal")
            if np.any(M < 0.0):
                raise ValueError(f"{name} must be nonnegative")
        if W.shape != Z.shape:
            raise ValueError("W and Z must have the same shape")
        if self.lambda_c < 0 or self.lambda_s < 0:
            raise ValueError("tuning parameters must be nonnegative")
        if not self.epsilon_abs > 0:
            raise ValueError("epsilon_abs must be positive")
        W.setflags(write=False)
        Z.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "Z", Z)

    @property
    def p(self) -> int:
        return int(self.W.shape[0])

    def with_lambdas(self, lambda_c=None, lambda_s=None) -> "PenaltyConfig":
        # W and Z are already validated and read-only, so copy instead of rebuilding
        new = copy.copy(self)
        for name, val in (("lambda_c", lambda_c), ("lambda_s", lambda_s)):
            if val is not None:
                if not float(val) >= 0:
                    raise ValueError("tuning parameters must be nonnegative")
                object.__setattr__(new, name, float(val))
        return new

    @classmethod
    def unpenalized(cls, p: int) -> "PenaltyConfig":
        return cls(np.zeros((p, p)), default_sparsity_weights(p))


def default_sparsity_weights(p: int) -> np.ndarray:
    return np.ones((p, p)) - np.eye(p)


def regularized_inverse(S) -> tuple[np.ndarray, bool]:
    """S^-1 when the Cholesky factorization succeeds, else (S + I)^-1.

    Returns the inverse and whether the fallback was used.
    """
    S = np.asarray(S, dtype=float)
    p = S.shape[0]
    try:
        L = np.linalg.cholesky(S)
        fallback = False
    except np.linalg.LinAlgError:
        L = np.linalg.cholesky(S + np.eye(p))
        fallback = True
    Linv = np.linalg.solve(L, np.eye(p))
    M = Linv.T @ Linv
    return 0.5 * (M + M.T), fallback


def pairwise_distance(M, j: int, jp: int) -> float:
    """Distance between columns j and j' ignoring the (j, j') pair, diagonals compared."""
    if j == jp:
        raise ValueError("pairwise_distance needs two different indices")
    M = np.asarray(M, dtype=float)
    mask = np.ones(M.shape[0], dtype=bool)
    mask[[j, jp]] = False
    d2 = (M[j, j] - M[jp, jp]) ** 2 + np.sum((M[j, mask] - M[jp, mask]) ** 2)
    return float(np.sqrt(d2))


def squared_distance_matrix(M) -> np.ndarray:
    """All squared pairwise distances d^2_jj'(M)."""
    M = np.asarray(M, dtype=float)
    sq = np.sum(M * M, axis=1)
    full = sq[:, None] + sq[None, :] - 2.0 * M @ M.T
    diag = np.diag(M)
    # drop the m = j and m = j' terms of the row difference, add the diagonal term
    D2 = (full - (diag[:, None] - M) ** 2 - (M - diag[None, :]) ** 2
          + (diag[:, None] - diag[None, :]) ** 2)
    D2 = np.maximum(0.5 * (D2 + D2.T), 0.0)
    np.fill_diagonal(D2, 0.0)
    return D2


def knn_edges(D2, knn: int) -> np.ndarray:
    """Symmetrized k-nearest-neighbor adjacency; ties go to the smaller index."""
    p = D2.shape[0]
    adj = np.zeros((p, p), dtype=bool)
    k = min(int(knn), p - 1)
    for j in range(p):
        cand = np.delete(np.arange(p), j)
        order = cand[np.argsort(D2[j, cand], kind="stable")]
        adj[j, order[:k]] = True
    return adj | adj.T


def n_components(adj) -> int:
    n, _ = connected_components(np.asarray(adj, dtype=float) != 0, directed=False)
    return int(n)


def mst_repair(adj, D2) -> np.ndarray:
    """Add minimum spanning tree edges until the graph is connected.

    Kruskal over all pairs (edge length sqrt(D2), ties in lexicographic
    order); an MST edge is added only when it joins two components of the
    current graph.
    """
    adj = np.array(adj, dtype=bool)
    p = adj.shape[0]
    _, comp = connected_components(adj.astype(float), directed=False)
    parent = list(range(p))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    iu, ju = np.triu_indices(p, 1)
    order = np.lexsort((ju, iu, np.sqrt(D2[iu, ju])))
    # union-find over the current components, Kruskal over the full graph
    cparent = {c: c for c in set(comp.tolist())}

    def cfind(c):
        while cparent[c] != c:
            cparent[c] = cparent[cparent[c]]
            c = cparent[c]
        return c

    n_left = len(cparent)
    for e in order:
        if n_left == 1:
            break
        i, j = int(iu[e]), int(ju[e])
        ri, rj = find(i), find(j)
        if ri == rj:
            continue
        parent[ri] = rj  # edge is in the MST
        ci, cj = cfind(comp[i]), cfind(comp[j])
        if ci != cj:
            adj[i, j] = adj[j, i] = True
            cparent[ci] = cj
            n_left -= 1
    return adj


def build_weights(S, knn: int, phi: float, return_info: bool = False):
    """Gaussian k-NN weights on distances of S^-1 (or (S + I)^-1), made connected.

    The squared distances are normalized by their mean over the final
    (repaired) edge set.
    """
    S = np.asarray(S, dtype=float)
    if not np.all(np.isfinite(S)):
        raise DegenerateInputError("covariance matrix has non-finite entries")
    M, fallback = regularized_inverse(S)
    D2 = squared_distance_matrix(M)
    if not np.all(np.isfinite(D2)):
        raise DegenerateInputError("non-finite pairwise distances")
    p = S.shape[0]
    if p == 1:
        W = np.zeros((1, 1))
        return (W, {"fallback": fallback, "n_repair": 0}) if return_info else W
    adj = knn_edges(D2, knn)
    knn_adj = adj.copy()
    adj = mst_repair(adj, D2)
    iu, ju = np.nonzero(np.triu(adj, 1))
    mean = D2[iu, ju].mean()
    W = np.zeros((p, p))
    vals = np.exp(-phi * D2[iu, ju] / mean) if mean > 0 else np.ones(iu.shape[0])
    W[iu, ju] = vals
    W[ju, iu] = vals
    if return_info:
        n_repair = int(np.sum(np.triu(adj & ~knn_adj, 1)))
        return W, {"fallback": fallback, "n_repair": n_repair, "D2": D2, "M": M}
    return W


def fusion_threshold(S, tau: float = 1e-3) -> float:
    """tau times the median pairwise distance of S^-1 (or (S + I)^-1)."""
    M, _ = regularized_inverse(S)
    D2 = squared_distance_matrix(M)
    iu, ju = np.triu_indices(D2.shape[0], 1)
    if iu.size == 0:
        return tau
    med = float(np.median(np.sqrt(D2[iu, ju])))
    return tau * med if med > 0 else tau


def cluster_distance(k: int, l: int, params: BlockParameters,
                     assignment: ClusterAssignment) -> float:
    """Distance between the blocks of clusters k and l in (b, R) coordinates."""
    if k == l:
        raise ValueError("cluster_distance needs two different clusters")
    sizes = assignment.sizes.astype(float)
    return float(_kernels.cluster_distance(np.array(params.b), np.array(params.R),
                                           sizes, k, l))


def aggregate_weight(k: int, l: int, W, assignment: ClusterAssignment) -> float:
    if k == l:
        raise ValueError("aggregate_weight needs two different clusters")
    W = np.asarray(W)
    return float(W[np.ix_(assignment.members(k), assignment.members(l))].sum())


def smoothed_abs(x: float, eps: float):
    """Value, first and second derivative of the smoothed absolute value."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    v, d1, d2 = _kernels.smooth_abs(float(x), float(eps))
    return float(v), float(d1), float(d2)


def read_triplets(path, p: int) -> np.ndarray:
    """Symmetric matrix from a CSV of (j, j', value) rows."""
    M = np.zeros((p, p))
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() in ("j", "i", "row"):
                continue
            j, jp, v = int(row[0]), int(row[1]), float(row[2])
            M[j, jp] = M[jp, j] = v
    return M


def write_triplets(path, M) -> None:
    M = np.asarray(M)
    iu, ju = np.nonzero(np.triu(M, 1))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["j", "jp", "value"])
        for i, j in zip(iu.tolist(), ju.tolist()):
            w.writerow([i, j, repr(float(M[i, j]))])
