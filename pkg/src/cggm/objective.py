"""Penalized negative log-likelihood in block coordinates.

The per-cluster functions work on the state vector of one cluster,
``(b_kk, r_km for m != k in index order, r_kk)``, with every other cluster
held fixed. Values of :func:`cluster_objective` differ from
:func:`full_objective` by a constant that depends only on the fixed clusters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .blockmodel import ClusterAggregates, NotPositiveDefiniteError, PrecisionModel
from .penalty import PenaltyConfig

__all__ = [
    "InfeasibleStateError",
    "ModelAggregates",
    "ClusterLocalView",
    "full_objective",
    "cluster_objective",
    "gradient",
    "hessian",
    "dense_objective",
]


class InfeasibleStateError(ValueError):
    """Raised when a cluster state leaves the positive definite region."""


@dataclass(frozen=True)
class ModelAggregates:
    """Cluster sums of S, W and Z for one assignment."""

    USU: np.ndarray
    trS: np.ndarray
    UWU: np.ndarray
    UZU: np.ndarray

    @classmethod
    def build(cls, S, cfg: PenaltyConfig, labels) -> "ModelAggregates":
        s = ClusterAggregates.from_matrix(S, labels)
        w = ClusterAggregates.from_matrix(cfg.W, labels)
        z = ClusterAggregates.from_matrix(cfg.Z, labels)
        return cls(np.array(s.UMU), np.array(s.trace), np.array(w.UMU), np.array(z.UMU))

    def arrays(self):
        return self.USU, self.trS, self.UWU, self.UZU


def _check_dims(S, model: PrecisionModel, cfg: PenaltyConfig):
    S = np.asarray(S, dtype=float)
    if S.shape != (model.p, model.p) or cfg.p != model.p:
        raise ValueError("S, weights and model dimensions disagree")
    return S


def full_objective(model: PrecisionModel, S, cfg: PenaltyConfig,
                   aggregates: ModelAggregates | None = None) -> float:
    """-log|Theta| + tr(S Theta) + clusterpath penalty + smoothed lasso penalty."""
    S = _check_dims(S, model, cfg)
    if aggregates is None:
        aggregates = ModelAggregates.build(S, cfg, model.labels)
    b, R, sizes = model.arrays()
    val = _kernels.full_objective(b, R, sizes, *aggregates.arrays(),
                                  cfg.lambda_c, cfg.lambda_s, cfg.epsilon_abs)
    if not np.isfinite(val):
        raise NotPositiveDefiniteError("objective undefined outside the PD cone")
    return float(val)


def dense_objective(Theta, S, W, Z, lambda_c: float, lambda_s: float,
                    eps: float | None = 5e-3) -> float:
    """Objective evaluated on a dense matrix with pairwise column distances.

    ``eps=None`` uses the exact absolute value.
    """
    Theta = np.asarray(Theta, dtype=float)
    S = np.asarray(S, dtype=float)
    sign, ld = np.linalg.slogdet(Theta)
    if sign <= 0:
        return np.inf
    p = Theta.shape[0]
    val = -ld + float(np.sum(S * Theta))
    if lambda_c:
        for j in range(p):
            for jp in range(j + 1, p):
                if W[j, jp] != 0:
                    mask = np.ones(p, dtype=bool)
                    mask[[j, jp]] = False
                    d2 = (Theta[j, j] - Theta[jp, jp]) ** 2 + np.sum(
                        (Theta[j, mask] - Theta[jp, mask]) ** 2)
                    val += lambda_c * W[j, jp] * np.sqrt(d2)
    if lambda_s:
        off = ~np.eye(p, dtype=bool)
        x = Theta[off]
        ax = np.abs(x)
        if eps is not None:
            ax = np.where(ax < eps, (x * x + eps * eps) / (2 * eps), ax)
        val += lambda_s * float(np.sum(np.asarray(Z)[off] * ax))
    return float(val)


@dataclass
class ClusterLocalView:
    """Everything needed to evaluate cluster k's objective with the others fixed."""

    k: int
    b: np.ndarray
    R: np.ndarray
    sizes: np.ndarray
    V: np.ndarray
    Dpart: np.ndarray
    aggregates: ModelAggregates
    lambda_c: float
    lambda_s: float
    eps: float

    @classmethod
    def from_model(cls, model: PrecisionModel, k: int, S, cfg: PenaltyConfig,
                   aggregates: ModelAggregates | None = None) -> "ClusterLocalView":
        S = _check_dims(S, model, cfg)
        if not 0 <= k < model.K:
            raise IndexError(f"cluster {k} out of range")
        if aggregates is None:
            aggregates = ModelAggregates.build(S, cfg, model.labels)
        b, R, sizes = model.arrays()
        V, Dpart, ok = _kernels.prepare_view(b, R, sizes, aggregates.UWU, k,
                                             cfg.lambda_c)
        if not ok:
            raise NotPositiveDefiniteError("R* without cluster k is not positive definite")
        return cls(k, b, R, sizes, V, Dpart, aggregates, cfg.lambda_c,
                   cfg.lambda_s, cfg.epsilon_abs)

    @property
    def K(self) -> int:
        return int(self.b.shape[0])

    def state(self) -> np.ndarray:
        return _kernels.read_state(self.b, self.R, self.k)

    def h(self, state=None) -> float:
        """Schur complement b + (p_k - 1) r_kk - p_k r' V r."""
        x = self.state() if state is None else np.asarray(state, dtype=float)
        r = x[1:-1]
        pk = self.sizes[self.k]
        return float(x[0] + (pk - 1.0) * x[-1] - pk * r @ self.V @ r)

    def loaded(self, state):
        state = np.asarray(state, dtype=float)
        if state.shape != (self.K + 1,):
            raise ValueError(f"state must have length {self.K + 1}")
        b = self.b.copy()
        R = self.R.copy()
        _kernels.load_state(b, R, self.k, state)
        return b, R

    def _args(self):
        return (*self.aggregates.arrays(), self.V, self.Dpart, self.lambda_c,
                self.lambda_s, self.eps)


def _feasible_or_raise(view: ClusterLocalView, b, R):
    val = _kernels.cluster_objective_loaded(b, R, view.sizes, view.k, *view._args())
    if not np.isfinite(val):
        raise InfeasibleStateError("state violates h > 0 or b_kk > r_kk")
    return val


def cluster_objective(view: ClusterLocalView, state, cfg: PenaltyConfig | None = None) -> float:
    """Cluster-k objective up to a constant; raises on infeasible states.

    ``cfg``, when given, overrides the view's tuning parameters.
    """
    if cfg is not None:
        view = _with_cfg(view, cfg)
    b, R = view.loaded(state)
    return float(_feasible_or_raise(view, b, R))


def _with_cfg(view: ClusterLocalView, cfg: PenaltyConfig) -> ClusterLocalView:
    if (cfg.lambda_c, cfg.lambda_s, cfg.epsilon_abs) == (view.lambda_c, view.lambda_s, view.eps):
        return view
    _, Dpart, _ = _kernels.prepare_view(view.b, view.R, view.sizes,
                                        view.aggregates.UWU, view.k, cfg.lambda_c)
    return ClusterLocalView(view.k, view.b, view.R, view.sizes, view.V, Dpart,
                            view.aggregates, cfg.lambda_c, cfg.lambda_s,
                            cfg.epsilon_abs)


def _grad_hess(view, state, cfg):
    if cfg is not None:
        view = _with_cfg(view, cfg)
    b, R = view.loaded(state)
    _feasible_or_raise(view, b, R)
    return _kernels.grad_hess_loaded(b, R, view.sizes, view.k, *view._args())


def gradient(view: ClusterLocalView, state, cfg: PenaltyConfig | None = None) -> np.ndarray:
    """Analytic gradient with respect to (b_kk, r_k, r_kk)."""
    return _grad_hess(view, state, cfg)[0]


def hessian(view: ClusterLocalView, state, cfg: PenaltyConfig | None = None) -> np.ndarray:
    """Analytic Hessian with respect to (b_kk, r_k, r_kk)."""
    return _grad_hess(view, state, cfg)[1]
