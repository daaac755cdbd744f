from __future__ import annotations

import json

import numpy as np
import pytest

from resrand.cli import ingest_csv, main
from resrand.datasets import hormone_path
from resrand.errors import MissingColumn, NonNumericCell, NotSimilarWarning, RaggedRow


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def hormone_csv():
    return str(hormone_path())


@pytest.fixture
def dyadic_csv(tmp_path):
    rng = np.random.default_rng(0)
    lines = ["y,x1,rowc,colc"]
    for r in range(4):
        for c in range(r):
            lines.append(f"{rng.standard_normal():.6f},{abs(r - c)},n{r},n{c}")
    path = tmp_path / "dyads.csv"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


class TestIngest:
    def test_hormone(self, hormone_csv):
        d = ingest_csv(hormone_csv)
        assert d.n == 27 and d.p == 2 and d.names == ("intercept", "x1") and d.cluster.max() == 2

    def test_missing_y(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("x1,x2\n1,2\n")
        with pytest.raises(MissingColumn):
            ingest_csv(p)

    def test_non_numeric_cell_names_row_and_column(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("y,x1\n1,2\n3,abc\n")
        with pytest.raises(NonNumericCell) as info:
            ingest_csv(p)
        assert info.value.row == 3 and info.value.column == "x1"

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("y,x1\n1,2\n3\n")
        with pytest.raises(RaggedRow):
            ingest_csv(p)

    def test_dyadic_shares_node_numbering(self, dyadic_csv):
        from resrand.cli import twoway_layout

        d = ingest_csv(dyadic_csv)
        lay = twoway_layout(d)
        assert lay.dyadic and lay.n == 6 and lay.row_count == 4


class TestCommands:
    def test_test_single(self, capsys, hormone_csv):
        code, out, _ = _run(capsys, "test", "--data", hormone_csv, "--primitive", "global_perm", "--coef", "x1", "--a0", 0)
        rep = json.loads(out)
        assert code == 0 and rep["pval_two"] < 0.005 and rep["decision"] == "reject"

    def test_within_lot_permutation_rejects(self, capsys, hormone_csv):
        code, out, _ = _run(capsys, "test", "--data", hormone_csv, "--primitive", "perm", "--coef", "x1", "--a0", 0, "--draws", 2000)
        assert code == 0 and json.loads(out)["decision"] == "reject"

    def test_diagnose_sign_slope(self, capsys, hormone_csv):
        # one two-point slope is noisy with p = 2, so average over seeds
        slopes = []
        for seed in range(10):
            code, out, _ = _run(
                capsys, "diagnose", "--data", hormone_csv, "--primitive", "global_sign", "--draws", "100,10000", "--seed", seed
            )
            assert code == 0
            slopes.append(json.loads(out)["log_log_slope"])
        assert -0.7 <= np.mean(slopes) <= -0.3

    def test_comparison_table(self, capsys, hormone_csv):
        code, out, _ = _run(
            capsys, "test", "--data", hormone_csv, "--primitive", "sign", "--primitive", "perm", "--a", "0,1", "--a0", 0
        )
        rep = json.loads(out)
        assert [r["primitive"] for r in rep["comparison"]] == ["sign", "perm"]

    def test_rerun_is_bit_identical(self, capsys, hormone_csv):
        argv = ("test", "--data", hormone_csv, "--primitive", "global_sign", "--coef", "1", "--a0", -0.05, "--seed", 9)
        _, first, _ = _run(capsys, *argv)
        _, second, _ = _run(capsys, *argv)
        assert first == second
        assert json.loads(first)["seed"] == 9

    def test_primitive_required(self, capsys, hormone_csv):
        code, _, err = _run(capsys, "test", "--data", hormone_csv, "--coef", "x1", "--a0", 0)
        assert code == 2 and json.loads(err)["error"]["type"] == "InputError"

    def test_missing_cluster_column(self, capsys, dyadic_csv):
        code, _, err = _run(capsys, "test", "--data", dyadic_csv, "--primitive", "sign", "--coef", "x1", "--a0", 0)
        assert code == 2 and "cluster" in json.loads(err)["error"]["message"]

    def test_ci(self, capsys, hormone_csv):
        code, out, _ = _run(
            capsys, "ci", "--data", hormone_csv, "--primitive", "global_perm", "--coef", "x1", "--lo", -0.08, "--hi", -0.03, "--step", 5e-4
        )
        rep = json.loads(out)
        assert code == 0 and (rep["lower"], rep["upper"]) == (-0.0665, -0.0485)

    def test_exact_from_cluster_column(self, capsys, hormone_csv):
        with pytest.warns(NotSimilarWarning):
            code, out, _ = _run(capsys, "exact", "--data", hormone_csv, "--coef", "x1", "--a0", 0)
        rep = json.loads(out)
        assert code == 0 and rep["R_used"] == 8 and rep["exact"] is False and rep["notes"]

    def test_exact_balanced_clusters(self, capsys, tmp_path):
        rng = np.random.default_rng(3)
        treat = np.r_[np.ones(3), np.zeros(27)]
        rows = ["y,x1"] + [f"{rng.standard_normal():.8f},{int(t)}" for t in treat]
        p = tmp_path / "bf.csv"
        p.write_text("\n".join(rows))
        code, out, _ = _run(capsys, "exact", "--data", p, "--coef", "x1", "--a0", 0, "--clusters", 3)
        rep = json.loads(out)
        assert code == 0 and rep["exact"] is True and len(set(rep["clusters"])) == 3

    def test_exact_indivisible(self, capsys, tmp_path):
        rows = ["y,x1"] + [f"{i * 0.1:.3f},{int(i < 4)}" for i in range(30)]
        p = tmp_path / "bf.csv"
        p.write_text("\n".join(rows))
        code, _, err = _run(capsys, "exact", "--data", p, "--coef", "x1", "--a0", 0, "--clusters", 3)
        assert code == 2 and json.loads(err)["error"]["type"] == "IndivisibleDesign"

    def test_twoway_dyadic(self, capsys, dyadic_csv):
        code, out, _ = _run(capsys, "test", "--data", dyadic_csv, "--primitive", "twoway", "--coef", "x1", "--a0", 0)
        rep = json.loads(out)
        assert code == 0 and rep["R_used"] == 24 and rep["mode"] == "enumerated"

    def test_reflect_needs_time(self, capsys, hormone_csv):
        code, _, err = _run(capsys, "reflect", "--data", hormone_csv, "--coef", "x1", "--a0", 0)
        assert code == 2 and "time" in json.loads(err)["error"]["message"]

    def test_reflect(self, capsys, tmp_path):
        rng = np.random.default_rng(1)
        e = np.zeros(60)
        for t in range(1, 60):
            e[t] = 0.5 * e[t - 1] + rng.standard_normal()
        rows = ["y,x1,time"] + [f"{e[t]:.8f},{rng.standard_normal():.8f},{t}" for t in range(60)]
        p = tmp_path / "ts.csv"
        p.write_text("\n".join(rows))
        code, out, _ = _run(capsys, "reflect", "--data", p, "--coef", "x1", "--a0", 0, "--J", 3)
        assert code == 0 and json.loads(out)["decision"] in ("accept", "reject", "reject_with_prob", "undecided")

    def test_highdim_family(self, capsys, tmp_path):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((15, 25))
        y = 4 * X[:, 0] + rng.standard_normal(15)
        header = "y," + ",".join(f"x{j}" for j in range(25))
        body = [",".join(f"{v:.8f}" for v in [y[i], *X[i]]) for i in range(15)]
        p = tmp_path / "wide.csv"
        p.write_text("\n".join([header, *body]))
        code, out, _ = _run(capsys, "highdim", "--data", p, "--no-intercept", "--draws", 500)
        rep = json.loads(out)
        assert code == 0 and len(rep["per_coef_pvals"]) == 25

    def test_simulate_csv(self, capsys):
        code, out, _ = _run(capsys, "simulate", "--spec", '{"kind": "OneWayCluster", "J": 4, "cluster_size": 5}', "--methods", "sign,wald", "--reps", 4, "--format", "csv")
        assert code == 0 and out.splitlines()[0].startswith("scenario,")

    def test_simulate_registered(self, capsys):
        code, out, _ = _run(capsys, "simulate", "--scenario", "dyadic-m10", "--reps", 2, "--draws", 50)
        assert code == 0 and "twoway" in json.loads(out)["rejection_rate"]

    def test_diagnose(self, capsys, hormone_csv):
        code, out, _ = _run(capsys, "diagnose", "--data", hormone_csv, "--primitive", "global_sign", "--draws", "100,2000")
        rep = json.loads(out)
        assert code == 0 and rep["results"][1]["mean_deviation"] < rep["results"][0]["mean_deviation"]

    def test_numerical_error_exit_code(self, capsys, tmp_path):
        p = tmp_path / "sing.csv"
        p.write_text("y,x1,x2\n1,1,2\n2,2,4\n3,3,6\n5,4,8\n")
        code, _, err = _run(capsys, "test", "--data", p, "--primitive", "global_sign", "--coef", "x1", "--a0", 0)
        assert code == 3 and json.loads(err)["error"]["type"] == "SingularDesign"


class TestConfigFile:
    def test_section_supplies_options(self, capsys, tmp_path, hormone_csv):
        cfg = tmp_path / "run.ini"
        cfg.write_text(f"[test]\ndata = {hormone_csv}\nprimitive = sign\ncoef = x1\na0 = 0\n")
        code, out, _ = _run(capsys, "test", "--config", cfg)
        assert code == 0 and json.loads(out)["R_used"] == 8

    def test_flags_override_file(self, capsys, tmp_path, hormone_csv):
        cfg = tmp_path / "run.ini"
        cfg.write_text(f"[test]\ndata = {hormone_csv}\nprimitive = sign\ncoef = x1\na0 = 0\nseed = 4\n")
        _, out, _ = _run(capsys, "test", "--config", cfg, "--seed", 7)
        assert json.loads(out)["seed"] == 7

    def test_unknown_key(self, capsys, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[test]\nprimitve = sign\n")
        code, _, err = _run(capsys, "test", "--config", cfg)
        assert code == 2 and "primitve" in json.loads(err)["error"]["message"]

    def test_malformed_file_names_line(self, capsys, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[test]\njust some words\n")
        code, _, err = _run(capsys, "test", "--config", cfg)
        assert code == 2 and "line 2" in json.loads(err)["error"]["message"]

    def test_env_threads(self, capsys, monkeypatch, hormone_csv):
        monkeypatch.setenv("RESRAND_THREADS", "2")
        code, out, _ = _run(capsys, "test", "--data", hormone_csv, "--primitive", "global_sign", "--coef", "x1", "--a0", 0)
        assert code == 0 and json.loads(out)["config"]["threads"] == 2
