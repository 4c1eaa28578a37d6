import csv
import json

import numpy as np
import pytest

from qkbench.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_STUDY, main, parse_int_list
from qkbench.datasets import Dataset, read_dataset, write_dataset
from qkbench.errors import ConfigurationError
from qkbench.kernels import read_gram_csv

FRIEDMAN = "friedman:d=5,n=50"


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


def trial_lines(path):
    # Drop the wall-clock field so reruns can be compared line by line.
    lines = []
    for line in path.read_text().splitlines():
        row = json.loads(line)
        row.pop("wall_time", None)
        lines.append(json.dumps(row, sort_keys=True))
    return lines


def write_nh3_like(path, n_rows=193, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n_rows, 6))
    y = X @ rng.standard_normal(6)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"r{i}" for i in range(6)] + ["energy"])
        w.writerows(np.column_stack([X, y]).tolist())
    return path


@pytest.fixture
def one_qubit_set(tmp_path):
    x = np.array([[0.0], [0.7], [1.9], [3.0], [1.2]])
    ds = Dataset(x, np.arange(5.0), np.arange(4), np.array([4]), "CsvCustom")
    return write_dataset(ds, tmp_path / "toy")


class TestDataset:
    def test_friedman_split(self, tmp_path, capsys):
        out = tmp_path / "fr"
        code, text = run(["dataset", "gen", "--family", "friedman", "--d", 5, "--seed", 7, "--out", out], capsys)
        assert code == EXIT_OK
        report = json.loads(text)
        assert (report["n_train"], report["n_test"]) == (240, 60)
        assert 0 <= report["cbar"] <= 1
        ds = read_dataset(out)
        assert ds.X.shape == (300, 5) and ds.seed == 7
        assert json.loads((out / "manifest.json").read_text())

    def test_nh3_profile(self, tmp_path, capsys):
        src = write_nh3_like(tmp_path / "nh3.csv")
        code, text = run(["dataset", "load", "--csv", src, "--profile", "nh3", "--out", tmp_path / "nh3"], capsys)
        assert code == EXIT_OK
        report = json.loads(text)
        assert (report["n_train"], report["n_test"]) == (155, 38)

    def test_nh3_wrong_rows(self, tmp_path, capsys):
        src = write_nh3_like(tmp_path / "short.csv", n_rows=50)
        code, _ = run(["dataset", "load", "--csv", src, "--profile", "nh3", "--out", tmp_path / "x"], capsys)
        assert code == EXIT_CONFIG

    def test_missing_file(self, tmp_path, capsys):
        code, _ = run(["dataset", "load", "--csv", tmp_path / "absent.csv", "--out", tmp_path / "x"], capsys)
        assert code == EXIT_IO

    def test_unknown_family(self, tmp_path, capsys):
        code, _ = run(["dataset", "gen", "--family", "spirals", "--d", 3, "--out", tmp_path / "x"], capsys)
        assert code == EXIT_CONFIG

    def test_deterministic(self, tmp_path, capsys):
        for name in ("a", "b"):
            run(["dataset", "gen", "--family", "two-curves", "--control", 4, "--d", 3, "--seed", 2,
                 "--out", tmp_path / name], capsys)
        assert (tmp_path / "a" / "data.csv").read_bytes() == (tmp_path / "b" / "data.csv").read_bytes()


class TestGram:
    def test_fqk_diagonal(self, tmp_path, capsys):
        x = np.random.default_rng(0).uniform(size=(6, 2))
        ds = Dataset(x, x.sum(axis=1), np.arange(4), np.array([4, 5]), "CsvCustom")
        path = write_dataset(ds, tmp_path / "four")
        out = tmp_path / "g.csv"
        code, text = run(["gram", "--dataset", path, "--circuit", "ZZFeatureMap", "--kernel", "fqk",
                          "--out", out], capsys)
        assert code == EXIT_OK
        G = read_gram_csv(out)
        assert G.shape == (4, 4)
        np.testing.assert_allclose(np.diag(G.entries), 1.0, atol=1e-12)
        assert json.loads(text)["kind"] == "FQK"

    def test_pqk_bloch_oracle(self, one_qubit_set, tmp_path, capsys):
        out = tmp_path / "p.csv"
        code, _ = run(["gram", "--dataset", one_qubit_set, "--circuit", "SeparableRx", "--n-layers", 1,
                       "--kernel", "pqk", "--opset", "AllP1", "--outer", "gaussian", "--gamma", 1.0,
                       "--f-min", -1.0, "--f-max", 1.5, "--out", out, "--diagnostics"], capsys)
        assert code == EXIT_OK
        # RX(x)|0> has Bloch vector (0, -sin x, cos x), so F = 2 - 2 cos(x - x').
        raw = np.array([0.0, 0.7, 1.9, 3.0])
        x = -1.0 + 2.5 * (raw - raw.min()) / (raw.max() - raw.min())
        F = 2 - 2 * np.cos(x[:, None] - x[None, :])
        np.testing.assert_allclose(read_gram_csv(out).entries, np.exp(-F), atol=1e-12)
        diag = json.loads(out.with_suffix(".diagnostics.json").read_text())
        off = ~np.eye(4, dtype=bool)
        assert diag["var_F"] == pytest.approx(np.var(F[off]), abs=1e-10)

    def test_test_split_shape(self, one_qubit_set, tmp_path, capsys):
        out = tmp_path / "t.csv"
        code, _ = run(["gram", "--dataset", one_qubit_set, "--split", "test", "--out", out], capsys)
        assert code == EXIT_OK
        assert read_gram_csv(out).shape == (1, 4)

    def test_distance_identical(self, one_qubit_set, tmp_path, capsys):
        out = tmp_path / "g.csv"
        run(["gram", "--dataset", one_qubit_set, "--out", out], capsys)
        code, text = run(["gram-dist", out, out], capsys)
        assert code == EXIT_OK
        assert float(text) == 0.0

    def test_distance_missing(self, tmp_path, capsys):
        code, _ = run(["gram-dist", tmp_path / "a.csv", tmp_path / "b.csv"], capsys)
        assert code == EXIT_IO

    def test_bad_circuit(self, one_qubit_set, tmp_path, capsys):
        code, _ = run(["gram", "--dataset", one_qubit_set, "--circuit", "Nope", "--out", tmp_path / "g.csv"],
                      capsys)
        assert code == EXIT_CONFIG


def tune(tmp_path, capsys, study_id, *extra):
    return run(["tune", "--dataset", FRIEDMAN, "--runs-dir", tmp_path / "runs", "--study-id", study_id,
                "--n-trials", 4, *extra], capsys)


class TestTune:
    def test_layout(self, tmp_path, capsys):
        code, text = tune(tmp_path, capsys, "s")
        assert code == EXIT_OK
        study = tmp_path / "runs" / "s"
        for name in ("manifest.json", "trials.jsonl", "best.json", "grams/best_train.csv"):
            assert (study / name).exists()
        manifest = json.loads((study / "manifest.json").read_text())
        assert manifest["seeds"] == {"data": 0, "search": 0}
        assert manifest["dataset"]["n_train"] == 40
        assert len(trial_lines(study / "trials.jsonl")) == 4
        assert json.loads(text)["n_trials"] == 4

    def test_rerun_identical(self, tmp_path, capsys):
        tune(tmp_path, capsys, "a", "--search-seed", 3)
        tune(tmp_path, capsys, "b", "--search-seed", 3)
        runs = tmp_path / "runs"
        assert trial_lines(runs / "a" / "trials.jsonl") == trial_lines(runs / "b" / "trials.jsonl")

    def test_existing_log_needs_flag(self, tmp_path, capsys):
        tune(tmp_path, capsys, "s")
        code, _ = tune(tmp_path, capsys, "s")
        assert code == EXIT_CONFIG
        code, _ = tune(tmp_path, capsys, "s", "--overwrite")
        assert code == EXIT_OK
        assert len(trial_lines(tmp_path / "runs" / "s" / "trials.jsonl")) == 4

    def test_resume_extends(self, tmp_path, capsys):
        tune(tmp_path, capsys, "full", "--n-trials", 6)
        tune(tmp_path, capsys, "part")
        code, _ = tune(tmp_path, capsys, "part", "--resume", "--n-trials", 6)
        assert code == EXIT_CONFIG  # the trial budget is part of the configuration
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_trials": 6}))
        run(["tune", "--config", cfg, "--dataset", FRIEDMAN, "--runs-dir", tmp_path / "runs",
             "--study-id", "r", "--n-trials", 3], capsys)
        code, _ = run(["tune", "--config", cfg, "--dataset", FRIEDMAN, "--runs-dir", tmp_path / "runs",
                       "--study-id", "r", "--n-trials", 3, "--resume"], capsys)
        assert code == EXIT_OK
        assert len(trial_lines(tmp_path / "runs" / "r" / "trials.jsonl")) == 3

    def test_all_failed(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"space": {"f_min": {"kind": "uniform", "low": -3.0, "high": -2.0}}}))
        code, _ = tune(tmp_path, capsys, "bad", "--config", cfg, "--sampler", "random")
        assert code == EXIT_STUDY
        rows = [json.loads(l) for l in (tmp_path / "runs" / "bad" / "trials.jsonl").read_text().splitlines()]
        assert len(rows) == 4 and all(r["status"] == "failed" for r in rows)

    def test_bad_config(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text("{not json")
        assert tune(tmp_path, capsys, "x", "--config", cfg)[0] == EXIT_CONFIG
        cfg.write_text(json.dumps({"colour": "red"}))
        assert tune(tmp_path, capsys, "x", "--config", cfg)[0] == EXIT_CONFIG
        assert tune(tmp_path, capsys, "x", "--sampler", "annealing")[0] == EXIT_CONFIG

    def test_missing_config(self, tmp_path, capsys):
        assert tune(tmp_path, capsys, "x", "--config", tmp_path / "none.json")[0] == EXIT_IO

    def test_precedence(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_trials": 2, "search_seed": 9, "model": {"lam": 0.5, "kernel": "PQK"}}))
        run(["tune", "--config", cfg, "--dataset", FRIEDMAN, "--runs-dir", tmp_path / "runs",
             "--study-id", "p", "--kernel", "fqk"], capsys)
        config = json.loads((tmp_path / "runs" / "p" / "manifest.json").read_text())["config"]
        assert config["n_trials"] == 2
        assert config["search_seed"] == 9
        assert config["model"] == {"lam": 0.5, "kernel": "FQK"}
        assert config["sampler"] == "TPE"


class TestGrid:
    def test_cells(self, tmp_path, capsys):
        code, _ = run(["grid", "--dataset", FRIEDMAN, "--runs-dir", tmp_path / "runs", "--study-id", "g",
                       "--circuits", "SeparableRx,ZFeatureMap", "--qubits", "d", "--layers", "1..2",
                       "--n-trials", 2], capsys)
        assert code == EXIT_OK
        rows = [json.loads(l) for l in (tmp_path / "runs" / "g" / "trials.jsonl").read_text().splitlines()]
        cells = {(r["cell"]["circuit"], r["cell"]["n_qubits"], r["cell"]["n_layers"]) for r in rows}
        assert cells == {(c, 5, l) for c in ("SeparableRx", "ZFeatureMap") for l in (1, 2)}
        best = json.loads((tmp_path / "runs" / "g" / "best.json").read_text())
        assert len(best["cells"]) == 4

    def test_int_lists(self):
        assert parse_int_list("1..8") == list(range(1, 9))
        assert parse_int_list("d,2d", 5) == [5, 10]
        assert parse_int_list("1,2,4") == [1, 2, 4]
        with pytest.raises(ConfigurationError):
            parse_int_list("d")


@pytest.fixture(scope="module")
def study_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("study")
    code = main(["tune", "--dataset", FRIEDMAN, "--runs-dir", str(root), "--study-id", "imp",
                 "--n-trials", "32", "--sampler", "random", "--no-test"])
    assert code == EXIT_OK
    return root / "imp"


class TestAnalysis:
    def test_importance_sums_to_one(self, study_dir, tmp_path, capsys):
        out = tmp_path / "imp.json"
        code, _ = run(["importance", "--study", study_dir, "--out", out], capsys)
        assert code == EXIT_OK
        report = json.loads(out.read_text())
        total = sum(report["importances"].values())
        assert total == pytest.approx(1.0, abs=1e-8)

    def test_importance_too_few(self, tmp_path, capsys):
        tune(tmp_path, capsys, "few")
        code, _ = run(["importance", "--study", tmp_path / "runs" / "few"], capsys)
        assert code == EXIT_CONFIG

    def test_importance_missing(self, tmp_path, capsys):
        assert run(["importance", "--study", tmp_path / "nowhere"], capsys)[0] == EXIT_IO

    def test_correlate_matrix(self, study_dir, tmp_path, capsys):
        out = tmp_path / "corr.json"
        code, _ = run(["correlate", "--study", study_dir, "--variables", "lam,f_max,objective",
                       "--adjust", "--out", out], capsys)
        assert code == EXIT_OK
        doc = json.loads(out.read_text())
        assert doc["variables"] == ["lam", "f_max", "objective"]
        assert np.asarray(doc["coefficients"]).shape == (3, 3)

    def test_correlate_pair(self, study_dir, tmp_path, capsys):
        out = tmp_path / "pair.json"
        code, _ = run(["correlate", "--study", study_dir, "--pair", "lam,objective", "--controls", "f_max",
                       "--mode", "semipartial_x", "--method", "pearson", "--out", out], capsys)
        assert code == EXIT_OK
        doc = json.loads(out.read_text())
        assert doc["n"] == 32 and -1 <= doc["coefficient"] <= 1

    def test_correlate_unknown_variable(self, study_dir, tmp_path, capsys):
        code, _ = run(["correlate", "--study", study_dir, "--variables", "lam,zz", "--out", tmp_path / "c.json"],
                      capsys)
        assert code == EXIT_CONFIG


class TestKTA:
    def test_trace(self, tmp_path, capsys):
        code, text = run(["kta", "--dataset", "two-curves:D=3,d=4,n=40", "--circuit", "YZ_CX", "--n-qubits", 4,
                          "--learner", "qsvc", "--steps", 5, "--max-samples", 16, "--out", tmp_path / "k"],
                         capsys)
        assert code == EXIT_OK
        doc = json.loads((tmp_path / "k" / "kta.json").read_text())
        assert len(doc["trace"]) >= 6
        assert doc["best_kta"] >= doc["initial_kta"]
        assert "roc_auc_after" in doc
        assert (tmp_path / "k" / "manifest.json").exists()

    def test_untrainable(self, tmp_path, capsys):
        code, _ = run(["kta", "--dataset", FRIEDMAN, "--circuit", "ZFeatureMap", "--out", tmp_path / "k"], capsys)
        assert code == EXIT_CONFIG


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert capsys.readouterr().out.startswith("qkbench ")
