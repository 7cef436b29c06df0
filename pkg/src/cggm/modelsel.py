"""Cross-validated choice of k, phi, lambda_c and lambda_s.

Both the raw fit and its refitted counterpart are scored on every path point,
so one set of paths serves both selection variants. In covariance mode the
solver receives the inverse of the training covariance and the fitted model
is read as a clustered covariance matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _io
from .blockmodel import (
    NotPositiveDefiniteError,
    PrecisionModel,
    inverse_score,
    log_det,
    trace_term,
)
from .clusterpath import compute_path, refit
from .optimizer import SolverSettings, fit, model_to_dict
from .penalty import PenaltyConfig, build_weights, default_sparsity_weights, regularized_inverse

__all__ = [
    "DegenerateFoldError",
    "CvPlan",
    "CvResult",
    "lambda_s_grid",
    "make_folds",
    "cv_score",
    "fold_covariance",
    "solver_input",
    "select",
]

log = logging.getLogger(__name__)

VARIANTS = ("raw", "refit")


class DegenerateFoldError(ValueError):
    """A fold has a constant column or too few rows."""


def lambda_s_grid(S, n: int = 10) -> np.ndarray:
    """Ten values from 0 to max_{j != j'} |S_jj'|, each step twice the previous."""
    S = np.asarray(S, dtype=float)
    off = np.abs(S[~np.eye(S.shape[0], dtype=bool)])
    lam_max = float(off.max()) if off.size else 0.0
    steps = 2.0 ** np.arange(n) - 1.0
    return lam_max * steps / steps[-1]


def make_folds(n: int, G: int, seed: int) -> list:
    """Seeded random partition of ``range(n)`` into G nearly equal folds."""
    if G < 2 or n < G:
        raise ValueError("need 2 <= G <= n")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, G)]


def fold_covariance(X) -> np.ndarray:
    """Covariance with divisor n around the rows' own mean."""
    X = np.asarray(X, dtype=float)
    Xc = X - X.mean(axis=0)
    return Xc.T @ Xc / X.shape[0]


def solver_input(S, target: str) -> np.ndarray:
    if target == "precision":
        return S
    M, _ = regularized_inverse(S)
    return M


def _score(model: PrecisionModel, S_test) -> float:
    if model.target != "precision":
        return inverse_score(model, S_test)
    theta = model
    return -log_det(theta) + trace_term(S_test, theta)


def cv_score(fold_models, fold_covariances) -> float:
    """Mean over folds of -log|Theta_g| + tr(S_g Theta_g).

    Covariance-target models are inverted first.
    """
    if len(fold_models) != len(fold_covariances) or not fold_models:
        raise ValueError("need matching, non-empty lists")
    return float(np.mean([_score(m, S) for m, S in zip(fold_models, fold_covariances)]))


@dataclass(frozen=True)
class CvPlan:
    folds: int = 5
    knn: tuple = (1, 3, 5)
    phi: tuple | None = None
    lambda_s: tuple | None = None
    target: str = "precision"
    seed: int = 0
    variant: str = "refit"

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if self.target not in ("precision", "covariance"):
            raise ValueError("target must be precision or covariance")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def phis(self) -> tuple:
        if self.phi is not None:
            return tuple(self.phi)
        return (1.0,) if self.target == "precision" else (1.0, 2.0, 3.0)


@dataclass
class CvResult:
    best: dict
    table: list
    model: PrecisionModel
    raw_model: PrecisionModel
    folds: list = field(default_factory=list)
    variant: str = "refit"
    all_best: dict = field(default_factory=dict)
    final_models: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "best": self.best,
            "best_by_variant": self.all_best,
            "model": model_to_dict(self.model),
            "raw_model": model_to_dict(self.raw_model),
            "final_models": {k: model_to_dict(m) for k, m in self.final_models.items()},
            "folds": [[int(i) for i in f] for f in self.folds],
            "table": self.table,
        }

    def to_json(self) -> str:
        return _io.dumps(self.to_dict())


def _structure_key(model: PrecisionModel, eps: float):
    R = model.params.R
    return model.labels.tobytes(), (np.abs(R) < eps).tobytes()


def _path_curve(M_train, S_test, cfg, settings, target, eps):
    """Path on one training fold: (lambdas, raw scores, structure keys, models)."""
    path = compute_path(M_train, cfg, settings, target=target)
    models = [pt.model for pt in path.points]
    raw = np.array([_score(m, S_test) for m in models])
    keys = [_structure_key(m, eps) for m in models]
    return path.lambdas, raw, keys, models


def _refit_scores(job) -> dict:
    """Refit score for every distinct structure of one fold.

    The refit depends only on the training input and the frozen structure;
    ``starts`` holds the first model seen with each structure.
    """
    M_train, S_test, starts, settings, eps = job
    out = {}
    for key, model in starts.items():
        try:
            fitted = refit(model, M_train, settings, epsilon=eps, eps_conv=settings.eps_conv)
            out[key] = _score(fitted.model, S_test)
        except (NotPositiveDefiniteError, ArithmeticError):
            out[key] = np.inf
    return out


def _align(fold_curves):
    """Mean score over folds on the union of lambda values (nearest fitted value at or below)."""
    grid = np.unique(np.concatenate([c[0] for c in fold_curves]))
    out = {}
    for v, name in ((1, "raw"), (2, "refit")):
        total = np.zeros(grid.shape[0])
        for curve in fold_curves:
            lams, vals = curve[0], curve[v]
            idx = np.searchsorted(lams, grid, side="right") - 1
            total += vals[idx]
        out[name] = total / len(fold_curves)
    return grid, out


def _pick(table, variant):
    key = f"score_{variant}"
    best = None
    for row in table:
        cand = (row[key], -row["lambda_c"], -row["lambda_s"])
        if not np.isfinite(row[key]):
            continue
        if best is None or cand < best[0]:
            best = (cand, row)
    if best is None:
        raise NotPositiveDefiniteError("no grid point produced a finite CV score")
    return best[1]


def _prepare(X, standardize):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a 2-d array")
    if standardize:
        sd = X.std(axis=0)
        if np.any(sd == 0):
            raise DegenerateFoldError("constant column cannot be standardized")
        X = (X - X.mean(axis=0)) / sd
    return X


def select(X, plan: CvPlan | None = None, settings: SolverSettings | None = None,
           standardize: bool = False, workers: int = 1) -> CvResult:
    """Cross-validate the grid in ``plan`` and fit the selected model on all rows.

    Parameters
    ----------
    X : (n, p) array
        Observations in rows.
    plan : CvPlan, optional
    settings : SolverSettings, optional
    standardize : bool
        z-score the columns first.
    workers : int
        Processes used for the (knn, phi) groups; results do not depend on it.

    Returns
    -------
    CvResult
        The refitted (or raw, per ``plan.variant``) model at the best grid
        point together with the full score table.
    """
    plan = plan or CvPlan()
    settings = settings or SolverSettings()
    X = _prepare(X, standardize)
    n, p = X.shape
    folds = make_folds(n, plan.folds, plan.seed)
    S_full = fold_covariance(X)
    M_full = solver_input(S_full, plan.target)
    grid_s = np.asarray(plan.lambda_s if plan.lambda_s is not None
                        else lambda_s_grid(M_full), dtype=float)
    Z = default_sparsity_weights(p)
    eps = 5e-3

    fold_data = []
    for g, test in enumerate(folds):
        train = np.setdiff1d(np.arange(n), test)
        if test.size < 2 or np.any(X[train].std(axis=0) == 0):
            raise DegenerateFoldError(f"fold {g} has a constant column or too few rows")
        S_tr = fold_covariance(X[train])
        fold_data.append((solver_input(S_tr, plan.target), fold_covariance(X[test])))

    groups = [(knn, phi) for knn in plan.knn for phi in plan.phis]
    jobs = [(fold_data, grid_s, Z, eps, settings, plan.target, knn, phi)
            for knn, phi in groups]
    pool = None
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        pool = ProcessPoolExecutor(min(workers, len(jobs)))
    try:
        mapper = pool.map if pool is not None else map
        # curves[group][lambda_s][fold] = (lambdas, raw, keys, models)
        curves = list(mapper(_group_paths, jobs))
        # one refit per fold and structure, started from its first occurrence
        starts = [{} for _ in fold_data]
        for per_group in curves:
            for per_lam in per_group:
                for g, (_, _, keys, models) in enumerate(per_lam):
                    for key, m in zip(keys, models):
                        starts[g].setdefault(key, m)
        refit_jobs = [(M, S_te, st, settings, eps)
                      for (M, S_te), st in zip(fold_data, starts)]
        refit_scores = list(mapper(_refit_scores, refit_jobs))
    finally:
        if pool is not None:
            pool.shutdown()

    table = []
    for (knn, phi), per_group in zip(groups, curves):
        for lam_s, per_lam in zip(grid_s, per_group):
            fold_curves = [(lams, raw, np.array([refit_scores[g][k] for k in keys]))
                           for g, (lams, raw, keys, _) in enumerate(per_lam)]
            grid_c, scores = _align(fold_curves)
            for i, lam_c in enumerate(grid_c):
                table.append({"knn": int(knn), "phi": float(phi),
                              "lambda_s": float(lam_s), "lambda_c": float(lam_c),
                              "score_raw": float(scores["raw"][i]),
                              "score_refit": float(scores["refit"][i])})

    all_best = {v: _pick(table, v) for v in VARIANTS}
    finals = {v: _final_fit(M_full, all_best[v], Z, eps, settings, plan.target)
              for v in VARIANTS}
    raw_model = finals["raw"][0]
    refit_model = finals["refit"][1]
    best = all_best[plan.variant]
    chosen = refit_model if plan.variant == "refit" else raw_model
    return CvResult(best, table, chosen, raw_model, folds, plan.variant, all_best,
                    {"raw": raw_model, "refit": refit_model,
                     "raw_at_refit_choice": finals["refit"][0],
                     "refit_at_raw_choice": finals["raw"][1]})


def _group_paths(job) -> list:
    """Fold paths for one (knn, phi) pair over the whole lambda_s grid."""
    fold_data, grid_s, Z, eps, settings, target, knn, phi = job
    weights = [build_weights(M, knn, phi) for M, _ in fold_data]
    out = []
    for lam_s in grid_s:
        per_lam = []
        for (M_tr, S_te), W in zip(fold_data, weights):
            cfg = PenaltyConfig(W, Z, 0.0, float(lam_s), phi, knn, eps)
            per_lam.append(_path_curve(M_tr, S_te, cfg, settings, target, eps))
        out.append(per_lam)
    return out


def _final_fit(M, row, Z, eps, settings, target):
    """Raw model at the selected tuning on all data and its refit."""
    W = build_weights(M, row["knn"], row["phi"])
    cfg = PenaltyConfig(W, Z, 0.0, row["lambda_s"], row["phi"], row["knn"], eps)
    path = compute_path(M, cfg, settings, target=target)
    lams = path.lambdas
    i = int(np.searchsorted(lams, row["lambda_c"], side="right") - 1)
    pt = path.points[max(i, 0)]
    model = pt.model
    if pt.lambda_c != row["lambda_c"]:
        scale = pt.gamma_c / pt.lambda_c if pt.lambda_c > 0 else path.kappa * M.shape[0]
        cfg_sel = cfg.with_lambdas(lambda_c=scale * row["lambda_c"])
        eps_f = settings.fusion_eps(M)
        tuned = SolverSettings(eps_f, settings.eps_conv, settings.max_iter,
                               settings.golden_tol, settings.tau)
        model = fit(M, cfg_sel, tuned, init=model, target=target).model
    return model, refit(model, M, settings, epsilon=eps).model
