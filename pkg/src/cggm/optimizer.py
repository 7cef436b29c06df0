"""Cyclic block coordinate descent with fusion checks.

Each sweep visits the clusters in label order. A cluster first looks for its
nearest neighbour; if that distance is within the fusion threshold the two are
merged, otherwise its block of parameters takes one damped Newton step whose
length is chosen by golden-section search inside the positive definite region.
The sweep loop itself lives in :mod:`cggm._kernels`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _io, _kernels
from .blockmodel import (
    BlockParameters,
    ClusterAssignment,
    NotPositiveDefiniteError,
    PrecisionModel,
    singleton_model,
    trusted_model,
)
from .objective import ClusterLocalView, ModelAggregates
from .penalty import PenaltyConfig, fusion_threshold, regularized_inverse

__all__ = [
    "NonFiniteObjectiveError",
    "SolverSettings",
    "FitResult",
    "fit",
    "fusion_candidate",
    "fuse",
    "max_step",
    "line_search",
    "model_to_dict",
    "model_from_dict",
]


class NonFiniteObjectiveError(ArithmeticError):
    """The objective became non-finite; ``state`` holds the last arrays."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class SolverSettings:
    """Solver tolerances.

    ``eps_fusion=None`` selects the data-driven threshold
    ``tau * median_jj' d_jj'(S^-1)``.
    """

    eps_fusion: float | None = None
    eps_conv: float = 1e-7
    max_iter: int = 5000
    golden_tol: float = 5e-3
    tau: float = 1e-3
    check_pd: bool = False

    def __post_init__(self):
        if self.eps_fusion is not None and self.eps_fusion < 0:
            raise ValueError("eps_fusion must be nonnegative")
        for name in ("eps_conv", "golden_tol", "tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")

    def fusion_eps(self, S) -> float:
        if self.eps_fusion is not None:
            return float(self.eps_fusion)
        return fusion_threshold(S, self.tau)


@dataclass
class FitResult:
    model: PrecisionModel
    objective_trace: np.ndarray
    iterations: int
    converged: bool
    merge_log: list = field(default_factory=list)
    pd_violations: int = 0

    @property
    def objective(self) -> float:
        return float(self.objective_trace[-1])

    def to_dict(self) -> dict:
        return {
            "model": model_to_dict(self.model),
            "objective_trace": [float(v) for v in self.objective_trace],
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "merge_log": [[int(v) for v in row] for row in self.merge_log],
        }

    def to_json(self) -> str:
        return _io.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(model_from_dict(d["model"]),
                   np.asarray(d["objective_trace"], dtype=float),
                   int(d["iterations"]), bool(d["converged"]),
                   [tuple(row) for row in d["merge_log"]])


def model_to_dict(model: PrecisionModel) -> dict:
    iu = np.triu_indices(model.K)
    return {
        "target": model.target,
        "labels": [int(v) for v in model.labels],
        "b": [float(v) for v in model.params.b],
        "R_upper": [float(v) for v in model.params.R[iu]],
    }


def model_from_dict(d: dict) -> PrecisionModel:
    labels = np.asarray(d["labels"], dtype=np.int64)
    b = np.asarray(d["b"], dtype=float)
    K = b.shape[0]
    R = np.zeros((K, K))
    R[np.triu_indices(K)] = d["R_upper"]
    return PrecisionModel(ClusterAssignment(labels), BlockParameters(b, R),
                          d.get("target", "precision"))


def fusion_candidate(k: int, model: PrecisionModel, eps_f: float) -> int | None:
    """Nearest cluster to k when it lies within ``eps_f``; ties go to the smaller label."""
    b, R, sizes = model.arrays()
    best, best_d = None, np.inf
    for l in range(model.K):
        if l == k:
            continue
        d = _kernels.cluster_distance(b, R, sizes, k, l)
        if d < best_d:
            best, best_d = l, d
    return best if best_d <= eps_f else None


def fuse(k: int, l: int, model: PrecisionModel) -> PrecisionModel:
    """Merge clusters k and l by size-weighted averaging.

    The merged cluster takes index ``min(k, l)``. Raises
    :class:`NotPositiveDefiniteError` when the merged parameters are not PD.
    """
    if k == l:
        raise ValueError("cannot fuse a cluster with itself")
    b, R, sizes = model.arrays()
    b2, R2, _ = _kernels.fuse_params(b, R, sizes, k, l)
    lo, hi = min(k, l), max(k, l)
    labels = model.labels.copy()
    labels[labels == hi] = lo
    labels[labels > hi] -= 1
    return PrecisionModel(ClusterAssignment(labels), BlockParameters(b2, R2), model.target)


def max_step(view: ClusterLocalView, state, direction) -> float:
    """Largest step keeping h > 0 and b_kk - r_kk > 0 (capped at 1e6)."""
    return float(_kernels.max_step(np.asarray(state, dtype=float),
                                   np.asarray(direction, dtype=float),
                                   view.k, view.sizes, view.V))


def line_search(view: ClusterLocalView, state, direction, s_max: float,
                golden_tol: float = 5e-3) -> float:
    """Golden-section step on (0, s_max); returns 0 unless the objective decreases."""
    if not s_max > 0:
        return 0.0
    x = np.asarray(state, dtype=float)
    d = np.asarray(direction, dtype=float)
    lm = _kernels.line_model(x, d, view.b, view.R, view.sizes, view.k,
                             *view.aggregates.arrays(), view.V, view.Dpart,
                             view.lambda_c, view.lambda_s, view.eps)
    s, f = _kernels.golden(float(s_max), float(golden_tol), lm)
    return float(s) if f < _kernels.line_eval(0.0, lm) else 0.0


def _initial_model(S, init, target):
    if init is not None:
        return init
    M, _ = regularized_inverse(S)
    return singleton_model(M, target)


def fit(S, cfg: PenaltyConfig, settings: SolverSettings | None = None,
        init: PrecisionModel | None = None, *, allow_fusion: bool = True,
        pinned=None, target: str | None = None,
        aggregates: ModelAggregates | None = None) -> FitResult:
    """Minimize the penalized objective for fixed tuning parameters.

    Parameters
    ----------
    S : (p, p) array
        Sample covariance (or its inverse in covariance mode).
    cfg : PenaltyConfig
    settings : SolverSettings, optional
    init : PrecisionModel, optional
        Warm start; defaults to singletons from ``S^-1`` (``(S + I)^-1`` if
        ``S`` is singular).
    allow_fusion : bool
        Disable to keep the assignment of ``init`` fixed.
    pinned : (K, K) bool array, optional
        Between/within values held at their initial value. Requires
        ``allow_fusion=False``.
    aggregates : ModelAggregates, optional
        Cluster sums of ``S``, ``W`` and ``Z`` for the labels of ``init``,
        when the caller already has them.

    Returns
    -------
    FitResult
    """
    settings = settings or SolverSettings()
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] != cfg.p:
        raise ValueError("S must be square and match the weights")
    if not np.all(np.isfinite(S)):
        raise ValueError("S contains non-finite values")
    S = 0.5 * (S + S.T)
    model = _initial_model(S, init, target or (init.target if init else "precision"))
    if target is not None and model.target != target:
        model = PrecisionModel(model.assignment, model.params, target)
    if model.p != S.shape[0]:
        raise ValueError("init dimension does not match S")
    if pinned is not None and allow_fusion:
        raise ValueError("pinned entries require allow_fusion=False")
    K = model.K
    pin = np.zeros((K, K), dtype=np.bool_) if pinned is None else np.asarray(pinned, dtype=np.bool_)
    if pin.shape != (K, K):
        raise ValueError("pinned must be K x K")

    # without the clusterpath penalty nothing holds fused clusters together
    allow_fusion = allow_fusion and cfg.lambda_c > 0
    eps_f = settings.fusion_eps(S) if allow_fusion else 0.0
    agg = aggregates if aggregates is not None else ModelAggregates.build(S, cfg, model.labels)
    b, R, sizes = model.arrays()
    out = _kernels.fit_loop(
        b, R, sizes, model.labels.astype(np.int64), agg.USU, agg.trS, agg.UWU,
        agg.UZU, pin, float(cfg.lambda_c), float(cfg.lambda_s),
        float(cfg.epsilon_abs), float(eps_f), float(settings.eps_conv),
        int(settings.max_iter), float(settings.golden_tol), bool(allow_fusion),
        bool(settings.check_pd))
    (b, R, sizes, labels, trace, n_trace, merges, n_merges, iterations,
     converged, violations, status) = out
    state = {"b": b, "R": R, "labels": labels, "trace": trace[:n_trace]}
    if status != 0:
        raise NonFiniteObjectiveError(
            f"objective is not finite after {iterations} sweeps", state)
    if settings.check_pd and violations:
        raise NotPositiveDefiniteError(
            f"{violations} intermediate models failed the PD check")
    # the kernel keeps every iterate positive definite and labels canonical
    fitted = trusted_model(labels, b, R, model.target)
    merge_log = [tuple(int(v) for v in row) for row in merges[:n_merges]]
    return FitResult(fitted, trace[:n_trace].copy(), int(iterations),
                     bool(converged), merge_log, int(violations))
