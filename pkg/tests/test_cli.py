import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from cggm import _io
from cggm.blockmodel import materialize
from cggm.cli import main
from cggm.optimizer import model_from_dict, model_to_dict


def cli(argv):
    return main([str(a) for a in argv])


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert cli(["simulate", "--design", "chain", "--p", "15", "--n", "120",
                 "--seed", "7", "--out-dir", str(out)]) == 0
    return out


def load_data(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def test_simulate_writes_files(sim):
    header, X = load_data(sim / "data.csv")
    assert X.shape == (120, 15)
    assert header[0] == "x0"
    truth = json.loads((sim / "truth.json").read_text())
    assert truth["design"] == "chain" and len(truth["labels"]) == 15
    assert np.array(truth["truth"]).shape == (15, 15)


def test_simulate_is_deterministic(sim, tmp_path):
    assert cli(["simulate", "--design", "chain", "--seed", "7", "--out-dir", str(tmp_path)]) == 0
    for name in ("data.csv", "truth.json"):
        assert digest(sim / name) == digest(tmp_path / name)


def test_fit_mle(sim, tmp_path):
    out = tmp_path / "fit.json"
    assert cli(["fit", "--data", sim / "data.csv", "--lambda-c", "0", "--lambda-s", "0",
                 "--out", out]) == 0
    doc = json.loads(out.read_text())
    _, X = load_data(sim / "data.csv")
    Xc = X - X.mean(axis=0)
    S = Xc.T @ Xc / X.shape[0]
    T = materialize(model_from_dict(doc["model"]))
    assert np.linalg.norm(T - np.linalg.inv(S)) < 1e-6


def test_fit_output_round_trip(sim, tmp_path):
    out = tmp_path / "fit.json"
    assert cli(["fit", "--data", sim / "data.csv", "--lambda-c", "0.3", "--lambda-s", "0.02",
                 "--out", out]) == 0
    doc = json.loads(out.read_text())
    once = _io.dumps(doc["model"])
    again = _io.dumps(model_to_dict(model_from_dict(json.loads(once))))
    assert once == again
    # a fitted model can be fed back as warm start and reproduces itself bit for bit
    out2 = tmp_path / "fit2.json"
    assert cli(["fit", "--data", sim / "data.csv", "--lambda-c", "0.3", "--lambda-s", "0.02",
                 "--out", out2]) == 0
    assert digest(out) == digest(out2)


def test_path_dendrogram(sim, tmp_path):
    out, dend, nwk = tmp_path / "path.json", tmp_path / "dend.json", tmp_path / "tree.nwk"
    assert cli(["path", "--data", sim / "data.csv", "--lambda-s", "0", "--phi", "0.5",
                 "--knn", "3", "--out", out, "--dendrogram", dend, "--newick", nwk]) == 0
    doc = json.loads(out.read_text())
    Ks = [pt["K"] for pt in doc["points"]]
    assert Ks[0] == 15 and Ks[-1] == 1
    tree = json.loads(dend.read_text())
    assert len(tree["nodes"]) == 14 and tree["leaves"][0] == "x0"
    text = nwk.read_text().strip()
    assert text.endswith(";") and text.count("(") == 14


def test_path_is_hash_stable(sim, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert cli(["path", "--data", sim / "data.csv", "--lambda-s", "0.05",
                     "--out", out]) == 0
    assert digest(a) == digest(b)


def test_covariance_input_matches_data(sim, tmp_path):
    _, X = load_data(sim / "data.csv")
    Xc = X - X.mean(axis=0)
    S = Xc.T @ Xc / X.shape[0]
    cov = tmp_path / "S.csv"
    np.savetxt(cov, S, delimiter=",", fmt="%.17g")
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert cli(["fit", "--data", sim / "data.csv", "--lambda-c", "0.2", "--out", a]) == 0
    assert cli(["fit", "--covariance", cov, "--nobs", "120", "--lambda-c", "0.2",
                 "--out", b]) == 0
    ma = materialize(model_from_dict(json.loads(a.read_text())["model"]))
    mb = materialize(model_from_dict(json.loads(b.read_text())["model"]))
    assert np.allclose(ma, mb, atol=1e-10)


def test_refit_and_evaluate(sim, tmp_path):
    fit_out, ref_out, ev = tmp_path / "f.json", tmp_path / "r.json", tmp_path / "e.json"
    assert cli(["fit", "--data", sim / "data.csv", "--lambda-c", "1.0", "--lambda-s", "0.05",
                 "--out", fit_out]) == 0
    assert cli(["refit", "--data", sim / "data.csv", "--model", fit_out, "--out", ref_out]) == 0
    assert cli(["evaluate", "--model", ref_out, "--truth", sim / "truth.json",
                 "--exact-zeros", "--out", ev]) == 0
    rep = json.loads(ev.read_text())
    assert set(rep) == {"frobenius", "K_hat", "ari", "fpr", "fnr"}
    assert rep["frobenius"] >= 0 and -1 <= rep["ari"] <= 1


def test_cv_command(sim, tmp_path):
    out, folds = tmp_path / "cv.json", tmp_path / "folds.csv"
    assert cli(["cv", "--data", sim / "data.csv", "--folds", "3", "--knn", "3",
                 "--lambda-s", "0", "0.05", "--out", out, "--folds-out", folds]) == 0
    doc = json.loads(out.read_text())
    assert doc["best"]["knn"] == 3
    with open(folds) as fh:
        assert len(list(csv.reader(fh))) >= 120


def test_weights_command(sim, tmp_path):
    out = tmp_path / "w.csv"
    assert cli(["weights", "--data", sim / "data.csv", "--knn", "3", "--phi", "1",
                 "--out", out]) == 0
    from cggm.penalty import n_components, read_triplets
    W = read_triplets(out, 15)
    assert n_components(W) == 1 and np.all(W <= 1.0)
    # user weights are accepted back
    res = tmp_path / "f.json"
    assert cli(["fit", "--data", sim / "data.csv", "--weights", out, "--lambda-c", "0.1",
                 "--out", res]) == 0


def test_exit_code_input(tmp_path, capsys):
    assert cli(["fit", "--data", tmp_path / "missing.csv"]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"]["exit_code"] == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,x\n2,3\n")
    assert cli(["fit", "--data", bad]) == 2
    with pytest.raises(SystemExit) as info:
        cli(["fit", "--no-such-flag"])
    assert info.value.code == 2


def test_exit_code_numerical(sim, tmp_path, capsys):
    bad = tmp_path / "init.json"
    bad.write_text(json.dumps({"target": "precision", "labels": list(range(15)),
                               "b": [1.0] * 15,
                               "R_upper": [5.0 if i != j else 0.0
                                           for i in range(15) for j in range(i, 15)]}))
    assert cli(["fit", "--data", sim / "data.csv", "--init", bad]) == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"]["type"] == "NotPositiveDefiniteError"


def test_exit_code_internal(monkeypatch, sim, capsys):
    import cggm.cli as cli_mod

    def boom(args):
        raise KeyError("unexpected")

    monkeypatch.setattr(cli_mod, "cmd_fit", boom)
    code = cli(["fit", "--data", str(sim / "data.csv")])
    assert code == 4
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"]["exit_code"] == 4


def test_module_entry_point(sim):
    proc = subprocess.run([sys.executable, "-m", "cggm", "weights", "--data",
                           str(sim / "data.csv"), "--knn", "2"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[0] == "j,jp,value"
