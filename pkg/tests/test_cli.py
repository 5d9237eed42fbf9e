import csv
import json

import numpy as np
import pytest

from rdtree import Tree, write_dataset
from rdtree.cli import main
from rdtree.mc import generate


@pytest.fixture(scope="module")
def dgp1_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "d.csv"
    data, _ = generate("1", 4000, rep=1, seed=11)
    write_dataset(data, path)
    return path


@pytest.fixture(scope="module")
def fitted(dgp1_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit") / "tree.json"
    code = main(["fit", "--input", str(dgp1_csv), "--cutoff", "0", "--q", "1", "--seed", "7", "--out", str(out)])
    assert code == 0
    return out


def test_fit_two_leaves(fitted, capsys):
    tree = Tree.from_json(fitted.read_text())
    assert tree.n_leaves == 2 and tree.splits() == [(0, 0.5)]
    assert fitted.with_suffix(".txt").read_text().startswith("All")


def test_fit_prints_summary(dgp1_csv, tmp_path, capsys):
    main(["fit", "--input", str(dgp1_csv), "--cutoff", "0", "--seed", "7", "--out", str(tmp_path / "t.json")])
    out = capsys.readouterr().out
    assert "gamma*:" in out and "honest in-sample criterion:" in out and "ci_lo" in out


def test_fit_idempotent(dgp1_csv, fitted, tmp_path):
    again = tmp_path / "again.json"
    main(["fit", "--input", str(dgp1_csv), "--cutoff", "0", "--q", "1", "--seed", "7", "--out", str(again)])
    assert again.read_text() == fitted.read_text()


def test_missing_cutoff_is_usage_error(dgp1_csv, capsys):
    assert main(["fit", "--input", str(dgp1_csv)]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error[usage]:")


def test_fuzzy_without_takeup(dgp1_csv, capsys):
    assert main(["fit", "--input", str(dgp1_csv), "--cutoff", "0", "--design", "fuzzy"]) == 1
    assert "missing column t" in capsys.readouterr().err


def test_missing_file(tmp_path, capsys):
    assert main(["fit", "--input", str(tmp_path / "nope.csv"), "--cutoff", "0"]) == 1
    assert capsys.readouterr().err.startswith("error[")


def test_predict_roundtrip(dgp1_csv, fitted, tmp_path):
    out = tmp_path / "pred.csv"
    assert main(["predict", "--tree", str(fitted), "--input", str(dgp1_csv), "--out", str(out)]) == 0
    with out.open() as fh:
        rows = list(csv.DictReader(fh))
    tree = Tree.from_json(fitted.read_text())
    with dgp1_csv.open() as fh:
        z = np.array([[float(r["z1"]), float(r["z2"])] for r in csv.DictReader(fh)])
    np.testing.assert_array_equal([float(r["tau"]) for r in rows], tree.predict_tau(z))
    for r in rows:
        assert float(r["ci_lo"]) <= float(r["tau"]) <= float(r["ci_hi"])


def test_predict_single_leaf_constant(tmp_path):
    tree = {"design": "sharp", "cutoff": 0.0, "q": 1, "feature_names": ["a", "b"],
            "root": {"id": 1, "tau": 0.25, "se": 0.1, "n_plus": 40, "n_minus": 60}}
    tp = tmp_path / "t.json"
    tp.write_text(json.dumps(tree))
    q = tmp_path / "q.csv"
    q.write_text("a,b\n0,1\n5,-3\n100,2\n")
    out = tmp_path / "p.csv"
    assert main(["predict", "--tree", str(tp), "--input", str(q), "--out", str(out)]) == 0
    body = out.read_text().splitlines()[1:]
    assert len(set(body)) == 1 and body[0].startswith("0.25,0.1,")


def test_predict_arity_error(fitted, tmp_path, capsys):
    q = tmp_path / "q.csv"
    q.write_text("z1\n1\n0\n")
    assert main(["predict", "--tree", str(fitted), "--input", str(q)]) == 1
    assert "K=2" in capsys.readouterr().err


def test_print_tree(fitted, capsys):
    assert main(["print-tree", "--tree", str(fitted)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("All") and "z1 <= 0.5" in out


def test_simulate_errors(capsys):
    assert main(["simulate", "--dgp", "1", "--reps", "0"]) == 2
    assert main(["simulate", "--dgp", "9", "--reps", "1"]) == 2


def test_simulate_threads_identical(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    base = ["simulate", "--dgp", "1", "--n", "1000", "--reps", "3", "--seed", "1", "--n-eval", "1000"]
    assert main(base + ["--threads", "1", "--out", str(a)]) == 0
    assert main(base + ["--threads", "2", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.with_suffix(".csv").read_bytes() == b.with_suffix(".csv").read_bytes()


def test_config_file_and_flag_precedence(dgp1_csv, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# fit settings\ninput = {dgp1_csv}\ncutoff = 0\nq = 1\nseed = 7\nmin_gain = 1e9\n")
    out = tmp_path / "c.json"
    assert main(["--config", str(cfg), "fit", "--out", str(out)]) == 0
    assert Tree.from_json(out.read_text()).n_leaves == 1
    assert main(["--config", str(cfg), "fit", "--min-gain", "0", "--out", str(out)]) == 0
    assert Tree.from_json(out.read_text()).n_leaves == 2


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("bogus = 1\n")
    assert main(["--config", str(cfg), "fit", "--input", "x.csv", "--cutoff", "0"]) == 2
