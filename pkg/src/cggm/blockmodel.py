"""G-block parameterization of precision matrices.

A clustered precision matrix is stored through its cluster assignment and two
small arrays: ``b`` (diagonal value shared by the members of each cluster) and
the symmetric K x K matrix ``R`` (``R[k, k]`` is the within-cluster
off-diagonal value, ``R[k, l]`` the value between clusters ``k`` and ``l``).
Log-determinants, traces, inverses and positive definiteness checks are all
carried out on K x K quantities.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

__all__ = [
    "NotPositiveDefiniteError",
    "ClusterAssignment",
    "BlockParameters",
    "PrecisionModel",
    "ClusterAggregates",
    "canonical_labels",
    "materialize",
    "log_det",
    "trace_term",
    "block_inverse",
    "is_positive_definite",
    "singleton_model",
    "trusted_model",
]

TARGETS = ("precision", "covariance")


class NotPositiveDefiniteError(ValueError):
    """Raised when block parameters do not describe a positive definite matrix."""


def _frozen(a, dtype=float):
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def canonical_labels(labels) -> np.ndarray:
    """Renumber labels by order of first appearance."""
    labels = np.asarray(labels)
    mapping: dict = {}
    out = np.empty(labels.shape[0], dtype=np.int64)
    for j, lab in enumerate(labels.tolist()):
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[j] = mapping[lab]
    return out


@dataclass(frozen=True)
class ClusterAssignment:
    """Partition of p variables into K clusters."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.size == 0:
            raise ValueError("labels must be a non-empty 1-d array")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        K = int(labels.max()) + 1
        if labels.min() < 0 or np.any(np.bincount(labels, minlength=K) == 0):
            raise ValueError("labels must cover 0..K-1 without empty clusters")
        object.__setattr__(self, "labels", _frozen(labels, np.int64))

    @property
    def p(self) -> int:
        return int(self.labels.shape[0])

    @functools.cached_property
    def K(self) -> int:
        return int(self.labels.max()) + 1

    @functools.cached_property
    def sizes(self) -> np.ndarray:
        return _frozen(np.bincount(self.labels, minlength=self.K), np.int64)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)

    def membership_matrix(self) -> np.ndarray:
        U = np.zeros((self.p, self.K))
        U[np.arange(self.p), self.labels] = 1.0
        return U

    @classmethod
    def singletons(cls, p: int) -> "ClusterAssignment":
        return cls(np.arange(p))


@dataclass(frozen=True)
class BlockParameters:
    """Cluster-level parameters ``b`` (K,) and symmetric ``R`` (K, K)."""

    b: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float).reshape(-1)
        R = np.asarray(self.R, dtype=float)
        if R.shape != (b.shape[0], b.shape[0]):
            raise ValueError(f"R must be {b.shape[0]}x{b.shape[0]}, got {R.shape}")
        # single storage of the upper triangle
        upper = np.triu(R)
        R = upper + np.triu(R, 1).T
        object.__setattr__(self, "b", _frozen(b))
        object.__setattr__(self, "R", _frozen(R))

    @property
    def K(self) -> int:
        return int(self.b.shape[0])

    @property
    def a(self) -> np.ndarray:
        return self.b - np.diag(self.R)


@dataclass(frozen=True)
class PrecisionModel:
    """Clustered G-block matrix: assignment plus block parameters.

    ``target`` records whether the model estimates a precision matrix or
    (when fitted on an inverted covariance input) a covariance matrix.
    """

    assignment: ClusterAssignment
    params: BlockParameters
    target: str = "precision"
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        if self.params.K != self.assignment.K:
            raise ValueError(
                f"assignment has {self.assignment.K} clusters, parameters {self.params.K}"
            )
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.validate and not is_positive_definite(self):
            raise NotPositiveDefiniteError("block parameters are not positive definite")

    @property
    def p(self) -> int:
        return self.assignment.p

    @property
    def K(self) -> int:
        return self.assignment.K

    @property
    def labels(self) -> np.ndarray:
        return self.assignment.labels

    @property
    def sizes(self) -> np.ndarray:
        return self.assignment.sizes

    def arrays(self):
        """(b, R, sizes) as writable float arrays for the kernels."""
        return (np.array(self.params.b), np.array(self.params.R),
                self.sizes.astype(float))


def trusted_model(labels, b, R, target: str = "precision") -> PrecisionModel:
    """Build a model from kernel output without re-validating it.

    ``labels`` must be canonical and ``R`` symmetric; positive definiteness
    is the caller's responsibility.
    """
    assignment = object.__new__(ClusterAssignment)
    object.__setattr__(assignment, "labels", _frozen(labels, np.int64))
    params = object.__new__(BlockParameters)
    object.__setattr__(params, "b", _frozen(b))
    object.__setattr__(params, "R", _frozen(R))
    return PrecisionModel(assignment, params, target, validate=False)


def singleton_model(M, target: str = "precision") -> PrecisionModel:
    """Model with one cluster per variable reproducing the symmetric matrix ``M``."""
    M = np.asarray(M, dtype=float)
    R = M - np.diag(np.diag(M))
    return PrecisionModel(ClusterAssignment.singletons(M.shape[0]),
                          BlockParameters(np.diag(M), R), target)


def materialize(model: PrecisionModel) -> np.ndarray:
    """Dense p x p matrix U R U' + A."""
    return _kernels.materialize(model.params.b, model.params.R, model.labels)


def is_positive_definite(model: PrecisionModel) -> bool:
    """a_kk > 0 for every cluster and a K x K Cholesky of P^1/2 R* P^1/2."""
    b, R, sizes = model.arrays()
    _, ok = _kernels.block_logdet(b, R, sizes)
    return bool(ok)


def log_det(model: PrecisionModel) -> float:
    """log|Theta| = log|P^1/2 R* P^1/2| + sum_k (p_k - 1) log a_kk."""
    b, R, sizes = model.arrays()
    value, ok = _kernels.block_logdet(b, R, sizes)
    if not ok:
        raise NotPositiveDefiniteError("log_det of a non positive definite model")
    return float(value)


@dataclass(frozen=True)
class ClusterAggregates:
    """Cluster sums u_k' M u_l of a p x p matrix together with tr M_k."""

    UMU: np.ndarray
    trace: np.ndarray

    @classmethod
    def from_matrix(cls, M, labels) -> "ClusterAggregates":
        M = np.ascontiguousarray(M, dtype=float)
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        UMU, tr = _kernels.cluster_sums(M, labels, int(labels.max()) + 1)
        UMU.setflags(write=False)
        tr.setflags(write=False)
        return cls(UMU, tr)

    def merge(self, k: int, l: int) -> "ClusterAggregates":
        """Aggregates after fusing clusters k and l (merged cluster at min(k, l))."""
        lo, hi = min(k, l), max(k, l)
        UMU = np.array(self.UMU)
        UMU[lo, :] += UMU[hi, :]
        UMU[:, lo] += UMU[:, hi]
        UMU = np.delete(np.delete(UMU, hi, 0), hi, 1)
        tr = np.array(self.trace)
        tr[lo] += tr[hi]
        tr = np.delete(tr, hi)
        return ClusterAggregates(_frozen(UMU), _frozen(tr))


def trace_term(S, model: PrecisionModel, aggregates: ClusterAggregates | None = None) -> float:
    """tr(S Theta) = sum_kl r_kl u_k' S u_l + sum_k a_kk tr S_k."""
    S = np.asarray(S, dtype=float)
    if S.shape != (model.p, model.p):
        raise ValueError(f"S must be {model.p}x{model.p}, got {S.shape}")
    if aggregates is None:
        aggregates = ClusterAggregates.from_matrix(S, model.labels)
    R = model.params.R
    return float(np.sum(R * aggregates.UMU) + model.params.a @ aggregates.trace)


def block_inverse(model: PrecisionModel) -> PrecisionModel:
    """Inverse with the same assignment, via the orthogonal decomposition.

    The centering part inverts as a_kk -> 1 / a_kk and the cluster-mean part
    through the inverse of R*, giving R' = P^-1 R*^-1 P^-1 - diag(1 / (a_kk p_k)).
    """
    b_new, R_new = _inverse_params(model)
    other = "covariance" if model.target == "precision" else "precision"
    return PrecisionModel(model.assignment, BlockParameters(b_new, R_new), other)


def _inverse_params(model: PrecisionModel):
    b, R, sizes = model.arrays()
    _, ok = _kernels.block_logdet(b, R, sizes)
    if not ok:
        raise NotPositiveDefiniteError("cannot invert a non positive definite model")
    a = b - np.diag(R)
    M = _kernels.scaled_rstar(b, R, sizes)
    L, _ = _kernels.cholesky(M)
    Minv = _kernels.chol_inverse(L)
    inv_sqrt = 1.0 / np.sqrt(sizes)
    # P^-1 R*^-1 P^-1 = P^-1/2 (P^1/2 R* P^1/2)^-1 P^-1/2
    core = inv_sqrt[:, None] * Minv * inv_sqrt[None, :]
    a_new = 1.0 / a
    R_new = core - np.diag(a_new / sizes)
    b_new = np.diag(R_new) + a_new
    # singleton within values carry no information; keep them at zero
    single = np.flatnonzero(sizes <= 1.0)
    R_new[single, single] = 0.0
    return b_new, R_new


def inverse_score(model: PrecisionModel, S) -> float:
    """-log|Theta^-1| + tr(S Theta^-1) without building the inverse model."""
    b, R = _inverse_params(model)
    R = np.triu(R) + np.triu(R, 1).T  # as BlockParameters stores it
    sizes = model.sizes.astype(float)
    value, ok = _kernels.block_logdet(b, R, sizes)
    if not ok:
        raise NotPositiveDefiniteError("block parameters are not positive definite")
    UMU, tr = _kernels.cluster_sums(np.ascontiguousarray(S, dtype=float),
                                    model.labels.astype(np.int64), model.K)
    return -float(value) + float(np.sum(R * UMU) + (b - np.diag(R)) @ tr)
