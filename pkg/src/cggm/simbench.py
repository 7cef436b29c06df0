"""Simulation designs, evaluation metrics and a seeded study runner."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _io
from .blockmodel import PrecisionModel, block_inverse, materialize, singleton_model
from .modelsel import CvPlan, fold_covariance, select
from .optimizer import SolverSettings

__all__ = [
    "DESIGNS",
    "DesignError",
    "DesignSpec",
    "EvalReport",
    "design_matrix",
    "generate",
    "adjusted_rand_index",
    "evaluate",
    "replication_seed",
    "run_replication",
    "run_study",
    "summarize",
    "write_results_csv",
]

log = logging.getLogger(__name__)

DESIGNS = (
    "random", "chain", "unbalanced", "unstructured", "diag_balanced",
    "diag_unbalanced", "blockdiag_balanced", "blockdiag_unbalanced", "approx_variant",
)
MAX_ATTEMPTS = 1000
WITHIN, BETWEEN = 0.5, 0.25


class DesignError(RuntimeError):
    """No positive definite matrix was drawn within the attempt budget."""


@dataclass(frozen=True)
class DesignSpec:
    name: str = "chain"
    p: int = 15
    n: int = 120
    K: int = 3
    edge_prob: float = 0.1
    seed: int = 0
    approx: bool = False
    target: str = "precision"

    def __post_init__(self):
        if self.name not in DESIGNS:
            raise ValueError(f"unknown design {self.name!r}")
        if self.target not in ("precision", "covariance"):
            raise ValueError("target must be precision or covariance")
        if self.p < self.K or self.n < 2 or self.K < 1:
            raise ValueError("need p >= K >= 1 and n >= 2")


def _sizes(p, K, unbalanced):
    if unbalanced:
        base = np.array([3, 5, 7][:K] if K <= 3 else np.arange(1, K + 1) * 2 + 1, float)
        sizes = np.floor(base / base.sum() * p).astype(int)
        sizes[-1] += p - sizes.sum()
    else:
        sizes = np.array([len(a) for a in np.array_split(np.arange(p), K)])
    if np.any(sizes < 1):
        raise ValueError("cluster sizes must be positive")
    return sizes


def _is_pd(M):
    try:
        np.linalg.cholesky(M)
        return True
    except np.linalg.LinAlgError:
        return False


def _connected_pairs(name, K, rng):
    B = np.zeros((K, K), dtype=bool)
    if name == "random":
        pairs = [(a, b) for a in range(K) for b in range(a + 1, K)]
        a, b = pairs[int(rng.integers(len(pairs)))]
        B[a, b] = B[b, a] = True
    else:
        for k in range(K - 1):
            B[k, k + 1] = B[k + 1, k] = True
    return B


def design_matrix(spec: DesignSpec, rng: np.random.Generator):
    """Structured matrix (precision or covariance, per ``spec.target``) and true labels."""
    name, p, K = spec.name, spec.p, spec.K
    unbalanced = name in ("unbalanced", "diag_unbalanced", "blockdiag_unbalanced")
    if name == "unstructured":
        labels = np.arange(p)
    else:
        labels = np.repeat(np.arange(K), _sizes(p, K, unbalanced))
    same = labels[:, None] == labels[None, :]
    approx = spec.approx or name == "approx_variant"

    if name in ("diag_balanced", "diag_unbalanced"):
        M = np.full((p, p), WITHIN)
        np.fill_diagonal(M, labels + 1.0)
        if not _is_pd(M):
            raise DesignError(f"design {name} is not positive definite")
        return M, labels

    if name in ("chain", "unbalanced", "random", "approx_variant"):
        B = _connected_pairs(name, K, rng)
        linked = B[np.ix_(labels, labels)]
        for _ in range(MAX_ATTEMPTS if approx else 1):
            if approx:
                A = rng.uniform(0.4, 0.6, (p, p))
                C = rng.uniform(0.2, 0.3, (p, p))
                A = np.triu(A, 1) + np.triu(A, 1).T
                C = np.triu(C, 1) + np.triu(C, 1).T
            else:
                A = np.full((p, p), WITHIN)
                C = np.full((p, p), BETWEEN)
            M = np.where(same, A, np.where(linked, C, 0.0))
            np.fill_diagonal(M, 1.0)
            if _is_pd(M):
                return M, labels
        raise DesignError(f"no positive definite draw for {name}")

    # unstructured and blockdiagonal designs draw random edges
    for _ in range(MAX_ATTEMPTS):
        U = np.triu(rng.random((p, p)) < spec.edge_prob, 1)
        M = np.where(U | U.T, BETWEEN, 0.0)
        if name != "unstructured":
            M = np.where(same, WITHIN, M)
        np.fill_diagonal(M, 1.0)
        if _is_pd(M):
            return M, labels
    raise DesignError(f"no positive definite draw for {name} in {MAX_ATTEMPTS} attempts")


def generate(spec: DesignSpec):
    """Draw (X, truth, labels); ``truth`` is Theta or Sigma according to ``spec.target``."""
    rng = np.random.default_rng(spec.seed)
    truth, labels = design_matrix(spec, rng)
    sigma = np.linalg.inv(truth) if spec.target == "precision" else truth
    L = np.linalg.cholesky(0.5 * (sigma + sigma.T))
    X = rng.standard_normal((spec.n, spec.p)) @ L.T
    return X, truth, labels


def adjusted_rand_index(a, b) -> float:
    """Hubert-Arabie adjusted Rand index from the contingency table."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("label vectors differ in length")
    n = a.shape[0]
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    comb = lambda x: x * (x - 1) / 2.0
    index = comb(table).sum()
    sa = comb(table.sum(axis=1)).sum()
    sb = comb(table.sum(axis=0)).sum()
    total = comb(n)
    expected = sa * sb / total if total else 0.0
    top = 0.5 * (sa + sb)
    if top == expected:
        return 1.0
    return float((index - expected) / (top - expected))


@dataclass
class EvalReport:
    frobenius: float
    K_hat: int
    ari: float
    fpr: float
    fnr: float


def evaluate(estimate, truth, true_labels, exact_zeros: bool = False,
             eps: float = 5e-3) -> EvalReport:
    """Accuracy, aggregation and sparsity recognition of an estimate.

    ``estimate`` is a PrecisionModel or a dense matrix (treated as singletons).
    Zeros are entries with ``|theta| < eps`` unless ``exact_zeros`` is set.
    FPR or FNR is NaN when the truth has no zero or no nonzero off-diagonal entry.
    """
    if not isinstance(estimate, PrecisionModel):
        estimate = singleton_model(np.asarray(estimate, dtype=float))
    truth = np.asarray(truth, dtype=float)
    T = materialize(estimate)
    if T.shape != truth.shape:
        raise ValueError("estimate and truth differ in shape")
    off = ~np.eye(truth.shape[0], dtype=bool)
    est_zero = (T == 0.0) if exact_zeros else (np.abs(T) < eps)
    true_zero = truth == 0.0
    n_zero = np.sum(true_zero & off)
    n_nonzero = np.sum(~true_zero & off)
    fpr = np.sum(true_zero & off & ~est_zero) / n_zero if n_zero else math.nan
    fnr = np.sum(~true_zero & off & est_zero) / n_nonzero if n_nonzero else math.nan
    return EvalReport(float(np.linalg.norm(T - truth)), int(estimate.K),
                      adjusted_rand_index(estimate.labels, true_labels),
                      float(fpr), float(fnr))


def replication_seed(seed: int, design_index: int, rep: int) -> int:
    """Counter-based seed so results do not depend on execution order."""
    ss = np.random.SeedSequence([seed, design_index, rep])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def run_replication(spec: DesignSpec, plan: CvPlan, settings: SolverSettings) -> list:
    """Rows (method, EvalReport) for one simulated data set."""
    X, truth, labels = generate(spec)
    rows = []
    S = fold_covariance(X)
    if spec.target == "precision":
        res = select(X, plan, settings)
        rows.append(("cggm-raw", evaluate(res.final_models["raw"], truth, labels)))
        rows.append(("cggm-refit", evaluate(res.final_models["refit"], truth, labels,
                                            exact_zeros=True)))
        rows.append(("S-inverse", evaluate(np.linalg.inv(S), truth, labels)))
    else:
        cov_plan = CvPlan(plan.folds, plan.knn, plan.phi, plan.lambda_s, "covariance",
                          plan.seed, plan.variant)
        prec_plan = CvPlan(plan.folds, plan.knn, cov_plan.phis, plan.lambda_s,
                           "precision", plan.seed, plan.variant)
        res_s = select(X, cov_plan, settings)
        res_t = select(X, prec_plan, settings)
        rows.append(("cggm-sigma-raw", evaluate(res_s.final_models["raw"], truth, labels)))
        rows.append(("cggm-sigma-refit", evaluate(res_s.final_models["refit"], truth,
                                                  labels, exact_zeros=True)))
        theta_inv = block_inverse(res_t.final_models["refit"])
        rows.append(("cggm-theta-inv-refit", evaluate(theta_inv, truth, labels)))
        rows.append(("S", evaluate(S, truth, labels)))
    return rows


def run_study(designs, replications: int = 20, plan: CvPlan | None = None,
              settings: SolverSettings | None = None, seed: int = 0,
              p: int = 15, n: int = 120, target: str = "precision",
              workers: int = 1) -> list:
    """One row per design x replication x method; failures are recorded, not raised."""
    plan = plan or CvPlan(folds=3)
    settings = settings or SolverSettings()
    jobs = []
    for di, name in enumerate(designs):
        for rep in range(replications):
            spec = DesignSpec(name, p, n, 3, 0.1, replication_seed(seed, di, rep),
                              target=target)
            jobs.append((name, rep, spec))

    def run(job):
        name, rep, spec = job
        try:
            return name, rep, spec.seed, run_replication(spec, plan, settings), None
        except Exception as exc:  # recorded per replication
            log.warning("replication %s/%d failed: %s", name, rep, exc)
            return name, rep, spec.seed, [], f"{type(exc).__name__}: {exc}"

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            outs = list(pool.map(_run_job, [(j, plan, settings) for j in jobs]))
    else:
        outs = [run(j) for j in jobs]
    rows = []
    for name, rep, s, results, err in outs:
        if err is not None:
            rows.append({"design": name, "replication": rep, "seed": s, "method": "",
                         "frobenius": math.nan, "K_hat": -1, "ari": math.nan,
                         "fpr": math.nan, "fnr": math.nan, "error": err})
        for method, r in results:
            rows.append({"design": name, "replication": rep, "seed": s, "method": method,
                         **asdict(r), "error": ""})
    return rows


def _run_job(args):
    (name, rep, spec), plan, settings = args
    try:
        return name, rep, spec.seed, run_replication(spec, plan, settings), None
    except Exception as exc:
        return name, rep, spec.seed, [], f"{type(exc).__name__}: {exc}"


def summarize(rows) -> dict:
    """Mean and standard deviation per design and method."""
    out: dict = {}
    keys = ("frobenius", "K_hat", "ari", "fpr", "fnr")
    groups: dict = {}
    for r in rows:
        if r["error"]:
            continue
        groups.setdefault((r["design"], r["method"]), []).append(r)
    for (design, method), rs in sorted(groups.items()):
        stats = {}
        for k in keys:
            v = np.array([r[k] for r in rs], dtype=float)
            v = v[~np.isnan(v)]
            stats[k] = {"mean": float(v.mean()) if v.size else math.nan,
                        "std": float(v.std(ddof=1)) if v.size > 1 else math.nan}
        stats["n"] = len(rs)
        out.setdefault(design, {})[method] = stats
    return out


def write_results_csv(rows, path) -> None:
    fields = ["design", "replication", "seed", "method", "frobenius", "K_hat", "ari",
              "fpr", "fnr", "error"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("%.17g" % r[k] if isinstance(r[k], float) else r[k])
                        for k in fields})


def write_summary_json(rows, path) -> None:
    _io.dump(summarize(rows), path)
