"""Clusterpath over an automatically chosen lambda_c sequence, dendrograms and refitting."""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass

import numpy as np

from . import _io
from .blockmodel import (
    BlockParameters,
    NotPositiveDefiniteError,
    PrecisionModel,
    is_positive_definite,
    materialize,
    trusted_model,
)
from .objective import ModelAggregates
from .optimizer import FitResult, SolverSettings, fit, model_to_dict
from .penalty import PenaltyConfig, n_components

__all__ = [
    "PathError",
    "PathPoint",
    "ClusterpathSolution",
    "kappa",
    "compute_path",
    "dendrogram",
    "dendrogram_newick",
    "refit",
]

log = logging.getLogger(__name__)

START = 0.5
GROWTH = 1.5
REL_CHANGE = 0.01
MAX_DEPTH = 12
MAX_ROUGH = 200
MAX_EXTRAPOLATION = 4.0
SKIP_FACTOR = 2.0
TIGHTEN_FACTOR = 1e-2
TIGHTEN_STEPS = 2


class PathError(RuntimeError):
    """Solver failure while computing a path; ``lambda_c`` names the offending value."""

    def __init__(self, message, lambda_c):
        super().__init__(f"{message} (lambda_c={lambda_c!r})")
        self.lambda_c = lambda_c


@dataclass
class PathPoint:
    lambda_c: float
    gamma_c: float
    result: FitResult

    @property
    def model(self) -> PrecisionModel:
        return self.result.model

    @property
    def K(self) -> int:
        return self.result.model.K

    @functools.cached_property
    def dense(self) -> np.ndarray:
        return materialize(self.result.model)

    @functools.cached_property
    def norm(self) -> float:
        return float(np.linalg.norm(self.dense))


@dataclass
class ClusterpathSolution:
    points: list
    kappa: float
    min_clusters: int = 1

    @functools.cached_property
    def merges(self) -> list:
        """(lambda_c, members_a, members_b) for every binary merge."""
        return _merge_events(self.points)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([pt.lambda_c for pt in self.points])

    def to_records(self) -> list:
        return [
            {
                "lambda_c": pt.lambda_c,
                "gamma_c": pt.gamma_c,
                "K": pt.K,
                "objective": pt.result.objective,
                "labels": [int(v) for v in pt.model.labels],
                "model": model_to_dict(pt.model),
            }
            for pt in self.points
        ]

    def to_json(self) -> str:
        return _io.dumps({"kappa": self.kappa, "points": self.to_records()})


def kappa(W) -> float:
    """1 / (sqrt(p - 1) * sum_{j<j'} w_jj')."""
    W = np.asarray(W, dtype=float)
    p = W.shape[0]
    total = np.triu(W, 1).sum()
    if p < 2 or total <= 0:
        return 0.0
    return float(1.0 / (np.sqrt(p - 1.0) * total))


def _coarser(coarse, fine) -> bool:
    """True when every cluster of ``fine`` lies inside one cluster of ``coarse``."""
    pairs = set(zip(fine.tolist(), coarse.tolist()))
    return len(pairs) == len(set(fine.tolist()))


def _rel_change(prev: PathPoint, new: PathPoint) -> float:
    return float(np.linalg.norm(prev.dense - new.dense) / prev.norm)


def _extrapolate(p0: PathPoint, p1: PathPoint, lam: float):
    """Linear prediction of the solution at ``lam`` from the last two points.

    Only used when both points share the assignment; returns None when the
    prediction is not positive definite.
    """
    if p0.K != p1.K or not np.array_equal(p0.model.labels, p1.model.labels):
        return None
    gap = p1.lambda_c - p0.lambda_c
    if gap <= 0:
        return None
    t = min((lam - p1.lambda_c) / gap, MAX_EXTRAPOLATION)
    b0, R0 = p0.model.params.b, p0.model.params.R
    b1, R1 = p1.model.params.b, p1.model.params.R
    guess = trusted_model(p1.model.labels, b1 + t * (b1 - b0), R1 + t * (R1 - R0),
                          p1.model.target)
    return guess if is_positive_definite(guess) else None


def compute_path(S, base_cfg: PenaltyConfig, settings: SolverSettings | None = None,
                 init: PrecisionModel | None = None, target: str = "precision",
                 max_points: int = 2000) -> ClusterpathSolution:
    """Fit a warm-started sequence of lambda_c values until K stops decreasing.

    The sequence starts at 0 and continues at 0.5 * 1.5^i until the number of
    clusters equals the number of connected components of W. Whenever two
    consecutive solutions differ by more than 1% (relative Frobenius), the
    midpoint is fitted first, recursively up to depth 12, so that every point
    is warm-started from its predecessor and the hierarchy stays nested.

    If an interval still changes by more than 1% at the depth cap, the path
    is recomputed with the convergence tolerance divided by 100 (at most
    twice); the last attempt accepts capped intervals as they are.
    """
    settings = settings or SolverSettings()
    S = np.asarray(S, dtype=float)
    eps_f = settings.fusion_eps(S)
    # a capped interval that still jumps means some fit stopped early near a
    # fusion; rerun the path with a tighter convergence tolerance
    for attempt in range(TIGHTEN_STEPS + 1):
        tol = settings.eps_conv * TIGHTEN_FACTOR ** attempt
        run = SolverSettings(eps_f, tol, settings.max_iter, settings.golden_tol,
                             settings.tau, settings.check_pd)
        try:
            return _path_run(S, base_cfg, run, init, target, max_points,
                             strict=attempt < TIGHTEN_STEPS)
        except _CappedJump as jump:
            log.debug("capped jump at lambda_c=%g with eps_conv=%g; tightening",
                      jump.lambda_c, tol)
    raise AssertionError("unreachable")


class _CappedJump(Exception):
    def __init__(self, lambda_c):
        super().__init__(lambda_c)
        self.lambda_c = lambda_c


def _path_run(S, base_cfg, settings, init, target, max_points, strict):
    p = S.shape[0]
    kap = kappa(base_cfg.W)
    scale = p * kap
    min_k = n_components(base_cfg.W) if p > 1 else 1
    points: list[PathPoint] = []
    # S, W and Z are fixed along the path: cluster sums depend on labels only
    sums: dict = {}
    S_sym = 0.5 * (S + S.T)  # as fit sees it

    def solve(lam, start):
        if start is not None and len(points) >= 2:
            start = _extrapolate(points[-2], points[-1], lam) or start
        cfg = base_cfg.with_lambdas(lambda_c=scale * lam)
        agg = None
        if start is not None:
            key = start.labels.tobytes()
            agg = sums.get(key)
            if agg is None:
                agg = sums[key] = ModelAggregates.build(S_sym, cfg, start.labels)
        try:
            res = fit(S, cfg, settings, init=start, target=target, aggregates=agg)
        except (ArithmeticError, ValueError) as exc:
            raise PathError(str(exc), lam) from exc
        return PathPoint(float(lam), float(scale * lam), res)

    def predicted_change(lam):
        # linear prediction from the last two points; 0 forces a fit
        if len(points) < 2:
            return 0.0
        p0, p1 = points[-2], points[-1]
        gap = p1.lambda_c - p0.lambda_c
        if gap <= 0 or not np.array_equal(p0.model.labels, p1.model.labels):
            return 0.0
        return (lam - p1.lambda_c) / gap * _rel_change(p0, p1)

    def advance(prev: PathPoint, lam: float, depth: int) -> PathPoint:
        cand = None
        while True:
            capped = depth >= MAX_DEPTH or len(points) >= max_points
            # skip fits that are bound to be rejected
            if cand is None and (capped or predicted_change(lam) <= SKIP_FACTOR * REL_CHANGE):
                cand = solve(lam, prev.model)
            if cand is not None and _rel_change(prev, cand) <= REL_CHANGE:
                break
            if cand is not None and capped:
                if strict and depth >= MAX_DEPTH:
                    raise _CappedJump(lam)
                break
            # each inserted midpoint halves the remaining interval
            depth += 1
            prev = advance(prev, 0.5 * (prev.lambda_c + lam), depth)
            # the rejected fit solves the same problem; keep it when it nests
            if cand is not None and not (_coarser(cand.model.labels, prev.model.labels)
                                         and _rel_change(prev, cand) <= REL_CHANGE):
                cand = None
        points.append(cand)
        return cand

    first = solve(0.0, init)
    points.append(first)
    prev = first
    lam = START
    for _ in range(MAX_ROUGH):
        if prev.model.K <= min_k or kap == 0.0:
            break
        prev = advance(prev, lam, 0)
        lam *= GROWTH
    else:
        log.warning("path stopped at K=%d before reaching %d clusters", prev.model.K, min_k)

    return ClusterpathSolution(points, kap, min_clusters=min_k)


def _merge_events(points) -> list:
    """(lambda_c, members_a, members_b) for every binary merge along the path.

    A multi-way merge between two consecutive points is split into binary
    merges at the same height, joining parts in order of their smallest member.
    """
    events = []
    for prev, cur in zip(points[:-1], points[1:]):
        old = prev.model.labels
        new = cur.model.labels
        for c in range(cur.model.K):
            parts = sorted({int(v) for v in old[new == c]})
            if len(parts) < 2:
                continue
            groups = sorted((np.flatnonzero(old == q).tolist() for q in parts),
                            key=lambda g: g[0])
            acc = groups[0]
            for g in groups[1:]:
                events.append((cur.lambda_c, list(acc), list(g)))
                acc = sorted(acc + g)
    return events


def dendrogram(path: ClusterpathSolution, names=None) -> dict:
    """Merge tree with heights equal to the lambda_c at which each fusion first appears."""
    p = path.points[0].model.p
    names = [str(j) for j in range(p)] if names is None else [str(n) for n in names]
    node_of = {j: j for j in range(p)}
    nodes = []
    for height, a, b in path.merges:
        na, nb = node_of[a[0]], node_of[b[0]]
        nid = p + len(nodes)
        members = sorted(a + b)
        nodes.append({"id": nid, "children": [na, nb], "height": float(height),
                      "members": members})
        for j in members:
            node_of[j] = nid
    roots = sorted(set(node_of.values()))
    return {"leaves": names, "nodes": nodes, "roots": roots}


def dendrogram_newick(tree: dict) -> str:
    p = len(tree["leaves"])
    by_id = {n["id"]: n for n in tree["nodes"]}

    def height(i):
        return by_id[i]["height"] if i >= p else 0.0

    def label(name):
        return "'" + name.replace("'", "''") + "'" if any(c in name for c in " (),:;'[]") else name

    def render(i, parent_h):
        length = "%.17g" % (parent_h - height(i))
        if i < p:
            return f"{label(tree['leaves'][i])}:{length}"
        kids = ",".join(render(c, height(i)) for c in by_id[i]["children"])
        return f"({kids}):{length}"

    roots = tree["roots"]
    if len(roots) == 1:
        r = roots[0]
        if r < p:
            return label(tree["leaves"][r]) + ";"
        kids = ",".join(render(c, height(r)) for c in by_id[r]["children"])
        return f"({kids});"
    top = max(height(r) for r in roots)
    return "(" + ",".join(render(r, top) for r in roots) + ");"


def refit(model: PrecisionModel, S, settings: SolverSettings | None = None,
          epsilon: float = 5e-3, eps_conv: float | None = None) -> FitResult:
    """Unpenalized likelihood with the clustering and zero pattern of ``model`` frozen.

    Between/within values with ``|r| < epsilon`` are pinned at exactly 0.
    With ``eps_conv=None`` the sweeps continue until one no longer lowers
    the objective.
    """
    settings = settings or SolverSettings()
    S = np.asarray(S, dtype=float)
    b, R, sizes = model.arrays()
    pinned = np.abs(R) < epsilon
    single = np.flatnonzero(sizes <= 1.0)
    pinned[single, single] = True
    R0 = np.where(pinned, 0.0, R)
    t = 1.0
    for _ in range(60):
        start = PrecisionModel(model.assignment,
                               BlockParameters(b, R0 * t),
                               model.target, validate=False)
        if is_positive_definite(start):
            break
        t *= 0.5
    else:
        raise NotPositiveDefiniteError("no positive definite start for the frozen pattern")
    start = PrecisionModel(start.assignment, start.params, model.target)
    cfg = PenaltyConfig.unpenalized(model.p)
    tol = np.finfo(float).tiny if eps_conv is None else min(settings.eps_conv, eps_conv)
    tight = SolverSettings(0.0, tol, settings.max_iter,
                           settings.golden_tol, settings.tau, settings.check_pd)
    return fit(S, cfg, tight, init=start, allow_fusion=False, pinned=pinned)
