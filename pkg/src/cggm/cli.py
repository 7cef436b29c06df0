"""Batch command-line interface.

Every command reads CSV/JSON inputs and writes deterministic JSON (or CSV for
tables). Failures print a JSON error document on stderr and exit with

* 2 for input problems (missing files, parse errors, degenerate data),
* 3 for numerical failures (loss of positive definiteness, non-finite objective),
* 4 for anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import _io
from .blockmodel import NotPositiveDefiniteError, block_inverse
from .clusterpath import PathError, compute_path, dendrogram, dendrogram_newick, refit
from .modelsel import CvPlan, DegenerateFoldError, fold_covariance, select, solver_input
from .objective import InfeasibleStateError
from .optimizer import (
    NonFiniteObjectiveError,
    SolverSettings,
    fit,
    model_from_dict,
)
from .penalty import (
    DegenerateInputError,
    PenaltyConfig,
    build_weights,
    default_sparsity_weights,
    read_triplets,
    write_triplets,
)
from .simbench import (
    DESIGNS,
    DesignError,
    DesignSpec,
    evaluate,
    generate,
    run_study,
    write_results_csv,
    write_summary_json,
)

log = logging.getLogger("cggm")

EXIT_INPUT, EXIT_NUMERICAL, EXIT_INTERNAL = 2, 3, 4
WORKERS_ENV = "CGGM_WORKERS"


class InputError(Exception):
    """Bad command-line input or unreadable file."""


# ---------------------------------------------------------------------------
# input helpers


def read_matrix_csv(path):
    """Numeric CSV with an optional header row; returns (array, names or None)."""
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise InputError(f"{path} is empty")
    names = None
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        names = [c.strip() for c in rows[0]]
        rows = rows[1:]
    try:
        data = np.array([[float(c) for c in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric entry ({exc})") from exc
    if data.ndim != 2 or data.shape[0] == 0 or len({len(r) for r in rows}) != 1:
        raise InputError(f"{path}: rows have unequal lengths")
    if names is not None and len(names) != data.shape[1]:
        raise InputError(f"{path}: header has {len(names)} names for {data.shape[1]} columns")
    if not np.all(np.isfinite(data)):
        raise InputError(f"{path} contains non-finite values")
    return data, names


def write_matrix_csv(path, M, names=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if names:
            w.writerow(names)
        for row in np.asarray(M):
            w.writerow(["%.17g" % v for v in row])


def read_json(path):
    try:
        return _io.load(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from exc


def _standardize(X):
    sd = X.std(axis=0)
    if np.any(sd == 0):
        raise InputError("constant column cannot be standardized")
    return (X - X.mean(axis=0)) / sd


def load_input(args):
    """(S, X or None, names) from --data or --covariance/--nobs."""
    if bool(args.data) == bool(getattr(args, "covariance", None)):
        raise InputError("give exactly one of --data or --covariance")
    if args.data:
        X, names = read_matrix_csv(args.data)
        if X.shape[0] < 2:
            raise InputError("need at least two observations")
        if args.standardize:
            X = _standardize(X)
        return fold_covariance(X), X, names
    S, names = read_matrix_csv(args.covariance)
    if S.shape[0] != S.shape[1] or not np.allclose(S, S.T, rtol=0, atol=1e-10 * np.abs(S).max()):
        raise InputError("covariance matrix must be square and symmetric")
    if args.nobs is None or args.nobs < 2:
        raise InputError("--covariance requires --nobs n >= 2")
    if args.standardize:
        d = np.sqrt(np.diag(S))
        if np.any(d <= 0):
            raise InputError("covariance has a zero variance")
        S = S / np.outer(d, d)
    return S, None, names


def load_model(path):
    doc = read_json(path)
    if "model" in doc:
        doc = doc["model"]
    try:
        return model_from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path} is not a model document: {exc}") from exc


def _settings(args) -> SolverSettings:
    return SolverSettings(args.eps_fusion, args.eps_conv, args.max_iter,
                          args.golden_tol, args.tau)


def _penalty(args, M, lambda_c=0.0, lambda_s=0.0) -> PenaltyConfig:
    p = M.shape[0]
    W = read_triplets(args.weights, p) if args.weights else build_weights(M, args.knn, args.phi)
    Z = (read_triplets(args.sparsity_weights, p) if args.sparsity_weights
         else default_sparsity_weights(p))
    return PenaltyConfig(W, Z, lambda_c, lambda_s, args.phi, args.knn)


def _emit(doc, out) -> None:
    if out:
        _io.dump(doc, out)
    else:
        sys.stdout.write(_io.dumps(doc))


def _workers(args) -> int:
    if getattr(args, "workers", None):
        return args.workers
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise InputError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args):
    S, _, _ = load_input(args)
    M = solver_input(S, args.target)
    cfg = _penalty(args, M, args.lambda_c, args.lambda_s)
    init = load_model(args.init) if args.init else None
    res = fit(M, cfg, _settings(args), init=init, target=args.target)
    _emit(res.to_dict(), args.out)


def cmd_path(args):
    S, _, names = load_input(args)
    M = solver_input(S, args.target)
    cfg = _penalty(args, M, 0.0, args.lambda_s)
    path = compute_path(M, cfg, _settings(args), target=args.target)
    tree = dendrogram(path, names)
    _emit({"kappa": path.kappa, "points": path.to_records(), "dendrogram": tree}, args.out)
    if args.dendrogram:
        _io.dump(tree, args.dendrogram)
    if args.newick:
        Path(args.newick).write_text(dendrogram_newick(tree) + "\n")


def cmd_cv(args):
    if not args.data:
        raise InputError("cv needs raw observations (--data)")
    X, _ = read_matrix_csv(args.data)
    plan = CvPlan(args.folds, tuple(args.knn), tuple(args.phi) if args.phi else None,
                  tuple(args.lambda_s) if args.lambda_s else None, args.target,
                  args.seed, args.variant)
    try:
        res = select(X, plan, _settings(args), standardize=args.standardize,
                     workers=_workers(args))
    except DegenerateFoldError as exc:
        raise InputError(str(exc)) from exc
    _emit(res.to_dict(), args.out)
    if args.folds_out:
        with open(args.folds_out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "fold"])
            for g, idx in enumerate(res.folds):
                for i in idx:
                    w.writerow([int(i), g])


def cmd_refit(args):
    S, _, _ = load_input(args)
    model = load_model(args.model)
    M = solver_input(S, model.target)
    res = refit(model, M, _settings(args), epsilon=args.epsilon)
    _emit(res.to_dict(), args.out)


def cmd_simulate(args):
    if args.replications:
        rows = run_study(args.design, args.replications,
                         CvPlan(folds=args.folds, target=args.target), _settings(args),
                         seed=args.seed, p=args.p, n=args.n, target=args.target,
                         workers=_workers(args))
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_results_csv(rows, out_dir / "results.csv")
        write_summary_json(rows, out_dir / "summary.json")
        return
    if len(args.design) != 1:
        raise InputError("a single simulated data set needs exactly one --design")
    spec = DesignSpec(args.design[0], args.p, args.n, args.K, args.edge_prob, args.seed,
                      args.approx, args.target)
    X, truth, labels = generate(spec)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out_dir / "data.csv", X, [f"x{j}" for j in range(spec.p)])
    _io.dump({"design": spec.name, "target": spec.target, "seed": spec.seed,
              "p": spec.p, "n": spec.n, "labels": labels, "truth": truth},
             out_dir / "truth.json")


def cmd_evaluate(args):
    model = load_model(args.model)
    doc = read_json(args.truth)
    try:
        truth = np.asarray(doc["truth"], dtype=float)
        labels = np.asarray(doc["labels"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{args.truth} is not a truth document: {exc}") from exc
    if args.invert:
        model = block_inverse(model)
    rep = evaluate(model, truth, labels, exact_zeros=args.exact_zeros, eps=args.epsilon)
    _emit({"frobenius": rep.frobenius, "K_hat": rep.K_hat, "ari": rep.ari,
           "fpr": rep.fpr, "fnr": rep.fnr}, args.out)


def cmd_weights(args):
    S, _, _ = load_input(args)
    M = solver_input(S, args.target)
    W = build_weights(M, args.knn, args.phi)
    if args.out:
        write_triplets(args.out, W)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["j", "jp", "value"])
        iu, ju = np.nonzero(np.triu(W, 1))
        for i, j in zip(iu.tolist(), ju.tolist()):
            w.writerow([i, j, repr(float(W[i, j]))])


# ---------------------------------------------------------------------------
# parser


def _add_input(p, covariance=True):
    p.add_argument("--data", help="CSV of observations (rows) by variables (columns)")
    if covariance:
        p.add_argument("--covariance", help="CSV with a precomputed covariance matrix")
        p.add_argument("--nobs", type=int, help="number of observations behind --covariance")
    p.add_argument("--standardize", action="store_true", help="z-score the variables first")
    p.add_argument("--target", choices=("precision", "covariance"), default="precision")


def _add_solver(p):
    g = p.add_argument_group("solver")
    g.add_argument("--eps-fusion", type=float, default=None)
    g.add_argument("--eps-conv", type=float, default=1e-7)
    g.add_argument("--max-iter", type=int, default=5000)
    g.add_argument("--golden-tol", type=float, default=5e-3)
    g.add_argument("--tau", type=float, default=1e-3)


def _add_weights(p, phi_default=1.0):
    p.add_argument("--knn", type=int, default=5)
    p.add_argument("--phi", type=float, default=phi_default)
    p.add_argument("--weights", help="triplet CSV (j, jp, value) overriding W")
    p.add_argument("--sparsity-weights", help="triplet CSV overriding Z")


class _Parser(argparse.ArgumentParser):
    """Usage errors follow the exit-code contract, with a JSON document."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.exit(_fail(EXIT_INPUT, InputError(message)))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cggm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit at fixed lambda_c and lambda_s")
    _add_input(p)
    _add_weights(p)
    _add_solver(p)
    p.add_argument("--lambda-c", type=float, default=0.0,
                   help="clusterpath penalty coefficient (as written in the objective)")
    p.add_argument("--lambda-s", type=float, default=0.0)
    p.add_argument("--init", help="model JSON used as warm start")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("path", help="clusterpath over an automatic lambda_c sequence")
    _add_input(p)
    _add_weights(p)
    _add_solver(p)
    p.add_argument("--lambda-s", type=float, default=0.0)
    p.add_argument("--out")
    p.add_argument("--dendrogram", help="write the merge tree JSON here as well")
    p.add_argument("--newick", help="write the dendrogram in Newick format")
    p.set_defaults(func=cmd_path)

    p = sub.add_parser("cv", help="cross-validated tuning and final refit")
    _add_input(p, covariance=False)
    _add_solver(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--knn", type=int, nargs="+", default=[1, 3, 5])
    p.add_argument("--phi", type=float, nargs="+")
    p.add_argument("--lambda-s", type=float, nargs="+")
    p.add_argument("--variant", choices=("raw", "refit"), default="refit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, help=f"worker processes (default ${WORKERS_ENV} or 1)")
    p.add_argument("--out")
    p.add_argument("--folds-out", help="CSV of (row, fold) assignments")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("refit", help="unpenalized refit with frozen structure")
    _add_input(p)
    _add_solver(p)
    p.add_argument("--model", required=True)
    p.add_argument("--epsilon", type=float, default=5e-3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_refit)

    p = sub.add_parser("simulate", help="simulate one data set or run a study")
    p.add_argument("--design", nargs="+", choices=DESIGNS, default=["chain"])
    p.add_argument("--p", type=int, default=15)
    p.add_argument("--n", type=int, default=120)
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--edge-prob", type=float, default=0.1)
    p.add_argument("--approx", action="store_true")
    p.add_argument("--target", choices=("precision", "covariance"), default="precision")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replications", type=int, default=0,
                   help="run the CV study with this many replications per design")
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--workers", type=int)
    p.add_argument("--out-dir", default=".")
    _add_solver(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="compare a model with a simulated truth")
    p.add_argument("--model", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--exact-zeros", action="store_true")
    p.add_argument("--epsilon", type=float, default=5e-3)
    p.add_argument("--invert", action="store_true", help="invert the model first")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("weights", help="clustering weights as a triplet CSV")
    _add_input(p)
    p.add_argument("--knn", type=int, default=5)
    p.add_argument("--phi", type=float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_weights)
    return parser


INPUT_ERRORS = (InputError, DegenerateInputError, DegenerateFoldError, DesignError,
                OSError)
NUMERICAL_ERRORS = (NotPositiveDefiniteError, NonFiniteObjectiveError, PathError,
                    InfeasibleStateError, ArithmeticError, np.linalg.LinAlgError)


def _fail(code, exc) -> int:
    doc = {"error": {"exit_code": code, "type": type(exc).__name__, "message": str(exc)}}
    if isinstance(exc, PathError):
        doc["error"]["lambda_c"] = exc.lambda_c
    sys.stderr.write(json.dumps(doc) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NUMERICAL_ERRORS as exc:  # before ValueError: the PD error subclasses it
        return _fail(EXIT_NUMERICAL, exc)
    except INPUT_ERRORS + (ValueError,) as exc:
        return _fail(EXIT_INPUT, exc)
    except Exception as exc:  # noqa: BLE001 - the exit-code contract covers everything
        log.debug("%s", traceback.format_exc())
        return _fail(EXIT_INTERNAL, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
