import json

import numpy as np
import pytest

from cggm.blockmodel import (
    BlockParameters,
    ClusterAssignment,
    PrecisionModel,
    materialize,
    singleton_model,
)
from cggm.clusterpath import (
    REL_CHANGE,
    PathError,
    compute_path,
    dendrogram,
    dendrogram_newick,
    kappa,
    refit,
)
from cggm.modelsel import fold_covariance
from cggm.objective import full_objective
from cggm.optimizer import SolverSettings, fit
from cggm.penalty import PenaltyConfig, build_weights, default_sparsity_weights
from cggm.simbench import DesignSpec, adjusted_rand_index, generate, replication_seed


def chain_path(seed, lambda_s=0.0, knn=5):
    X, truth, labels = generate(DesignSpec("chain", seed=seed))
    S = fold_covariance(X)
    W = build_weights(S, knn, 1.0)
    cfg = PenaltyConfig(W, default_sparsity_weights(15), 0.0, lambda_s, 1.0, knn)
    return S, cfg, truth, labels, compute_path(S, cfg)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(a)


def nested(fine, coarse):
    return len(set(zip(fine.tolist(), coarse.tolist()))) == len(set(fine.tolist()))


@pytest.fixture(scope="module")
def path_case():
    return chain_path(replication_seed(99, 1, 0))


def test_path_reaches_one_cluster(path_case):
    _, _, _, _, path = path_case
    assert path.points[0].K == 15
    assert path.points[-1].K == 1
    assert path.points[0].lambda_c == 0.0


def test_path_monotone_and_nested(path_case):
    _, _, _, _, path = path_case
    for a, b in zip(path.points[:-1], path.points[1:]):
        assert b.lambda_c > a.lambda_c
        assert b.K <= a.K
        assert nested(a.model.labels, b.model.labels)


def test_adjacent_relative_change(path_case):
    _, _, _, _, path = path_case
    for a, b in zip(path.points[:-1], path.points[1:]):
        assert rel(materialize(a.model), materialize(b.model)) <= REL_CHANGE


def test_gamma_is_rescaled_lambda(path_case):
    S, cfg, _, _, path = path_case
    k = kappa(cfg.W)
    assert k == pytest.approx(1.0 / (np.sqrt(14) * np.triu(cfg.W, 1).sum()))
    for pt in path.points:
        assert pt.gamma_c == pytest.approx(15 * k * pt.lambda_c)


def test_rescaling_identity(rng):
    A = rng.standard_normal((8, 8))
    m = singleton_model(A @ A.T + 8 * np.eye(8))
    V = rng.random((8, 8))
    W = np.triu(V, 1) + np.triu(V, 1).T
    S = np.eye(8)
    Z = default_sparsity_weights(8)
    one = full_objective(m, S, PenaltyConfig(W, Z, 0.6, 0.0))
    two = full_objective(m, S, PenaltyConfig(2 * W, Z, 0.3, 0.0))
    assert one == pytest.approx(two, abs=1e-12)
    assert kappa(2 * W) == pytest.approx(kappa(W) / 2)


def test_warm_start_consistency(path_case):
    S, cfg, _, _, path = path_case
    settings = SolverSettings(eps_fusion=SolverSettings().fusion_eps(S))
    for pt in path.points[::15]:
        again = fit(S, cfg.with_lambdas(lambda_c=pt.gamma_c), settings, init=pt.model)
        assert abs(again.objective - pt.result.objective) < 1e-9 * max(1.0, abs(pt.result.objective)) \
            or again.objective <= pt.result.objective


def test_disconnected_weights_stop_at_components():
    M = np.zeros((4, 4))
    M[:2, :2] = [[2.0, 1.0], [1.0, 2.0]]
    M[2:, 2:] = [[5.0, 1.0], [1.0, 5.0]]
    S = np.linalg.inv(M)
    W = np.zeros((4, 4))
    W[0, 1] = W[1, 0] = W[2, 3] = W[3, 2] = 1.0
    path = compute_path(S, PenaltyConfig(W, default_sparsity_weights(4)))
    assert path.min_clusters == 2
    assert path.points[-1].K == 2


def test_path_error_carries_lambda(monkeypatch):
    import cggm.clusterpath as cp

    def broken(*args, **kwargs):
        raise ArithmeticError("boom")

    monkeypatch.setattr(cp, "fit", broken)
    W = np.ones((3, 3)) - np.eye(3)
    with pytest.raises(PathError) as info:
        compute_path(np.eye(3), PenaltyConfig(W, default_sparsity_weights(3)))
    assert info.value.lambda_c == 0.0


def test_chain_true_partition_on_path():
    hits = 0
    for rep in range(20):
        _, _, _, labels, path = chain_path(replication_seed(5, 0, rep))
        hits += any(pt.K == 3 and adjusted_rand_index(pt.model.labels, labels) == 1.0
                    for pt in path.points)
    assert hits >= 15


def test_dendrogram_two_variables():
    S = np.array([[1.0, 0.3], [0.3, 1.2]])
    W = np.array([[0.0, 1.0], [1.0, 0.0]])
    path = compute_path(S, PenaltyConfig(W, default_sparsity_weights(2)))
    tree = dendrogram(path, names=["x", "y"])
    assert len(tree["nodes"]) == 1
    node = tree["nodes"][0]
    first_fused = next(pt.lambda_c for pt in path.points if pt.K == 1)
    assert node["height"] == first_fused
    assert node["children"] == [0, 1] and tree["roots"] == [2]
    assert dendrogram_newick(tree) == "(x:%.17g,y:%.17g);" % (first_fused, first_fused)


def test_dendrogram_monotone_heights(path_case):
    _, _, _, _, path = path_case
    tree = dendrogram(path)
    assert len(tree["nodes"]) == 14
    by_id = {n["id"]: n for n in tree["nodes"]}
    for n in tree["nodes"]:
        for c in n["children"]:
            if c in by_id:
                assert n["height"] >= by_id[c]["height"]
    json.dumps(tree)
    leaves = sorted(j for n in tree["nodes"] for j in n["members"] if n["id"] == tree["roots"][0])
    assert leaves == list(range(15))


def test_dendrogram_chain_subtrees():
    hits = 0
    for rep in range(20):
        _, _, _, labels, path = chain_path(replication_seed(5, 0, rep))
        tree = dendrogram(path)
        groups = {frozenset(np.flatnonzero(labels == k).tolist()) for k in range(3)}
        found = {frozenset(n["members"]) for n in tree["nodes"]}
        hits += groups <= found
    assert hits >= 15


def test_refit_full_model_is_mle():
    X, _, _ = generate(DesignSpec("chain", seed=3))
    S = fold_covariance(X)
    M = np.linalg.inv(S)
    start = singleton_model(np.diag(np.diag(M)) + 0.9 * (M - np.diag(np.diag(M))))
    res = refit(start, S, epsilon=0.0)
    assert np.linalg.norm(materialize(res.model) - M) < 1e-6


def test_refit_fixed_point():
    X, _, _ = generate(DesignSpec("chain", seed=4))
    S = fold_covariance(X)
    M = np.linalg.inv(S)
    first = refit(singleton_model(M), S, epsilon=0.0)
    again = refit(first.model, S, epsilon=0.0)
    assert np.max(np.abs(materialize(again.model) - materialize(first.model))) < 1e-8


def test_refit_pins_zeros():
    labels = np.repeat([0, 1, 2], 5)
    R = np.array([[0.5, 0.25, 1e-3], [0.25, 0.5, 0.25], [1e-3, 0.25, 0.5]])
    model = PrecisionModel(ClusterAssignment(labels), BlockParameters(np.ones(3), R))
    X, _, _ = generate(DesignSpec("chain", seed=5))
    res = refit(model, fold_covariance(X))
    assert res.model.params.R[0, 2] == 0.0
    assert np.array_equal(res.model.labels, labels)


def test_refit_beats_raw_on_chain():
    wins = 0
    for rep in range(20):
        S, _, truth, labels, path = chain_path(replication_seed(5, 0, rep), lambda_s=0.02)
        pts = [pt for pt in path.points if pt.K == 3
               and adjusted_rand_index(pt.model.labels, labels) == 1.0]
        if not pts:
            continue
        raw = pts[0].model
        ref = refit(raw, S).model
        wins += np.linalg.norm(materialize(ref) - truth) < np.linalg.norm(materialize(raw) - truth)
    assert wins > 10


def test_path_json_export(path_case):
    _, _, _, _, path = path_case
    doc = json.loads(path.to_json())
    assert len(doc["points"]) == len(path.points)
    assert doc["points"][-1]["K"] == 1
