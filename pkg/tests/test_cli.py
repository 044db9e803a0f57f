import json
import subprocess
import sys

import numpy as np
import pytest

from specmoment.cli import EXPERIMENTS, build_parser, experiment_configs, main
from specmoment.io import load_params


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def ring_files(tmp_path):
    trip = tmp_path / "ring.txt"
    assert run("simulate", "--scenario", "ring", "--n-triplets", 300, "--seed", 1, "--out", trip) == 0
    return trip, tmp_path / "ring.model.json"


class TestSimulate:
    def test_line_count_and_model_file(self, ring_files):
        trip, model = ring_files
        assert len(trip.read_text().splitlines()) == 300
        assert json.loads(model.read_text())["n_obs"] == 5

    def test_seed_determinism(self, tmp_path):
        for name in ("a", "b"):
            run("simulate", "--scenario", "grid", "--n-triplets", 50, "--seed", 3,
                "--out", tmp_path / f"{name}.txt")
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_string_windows(self, tmp_path):
        out = tmp_path / "s.txt"
        assert run("simulate", "--scenario", "string", "--length", 15, "--out", out) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 13 and lines.count("0 0 0") == 8

    def test_bad_scenario_parameter(self, tmp_path, capsys):
        code = run("simulate", "--scenario", "chain", "--p-reset", 1.5, "--out", tmp_path / "c.txt")
        assert code == 1
        assert "error" in capsys.readouterr().err


class TestFitAndEval:
    def test_spec_then_eval(self, ring_files, tmp_path, capsys):
        trip, model = ring_files
        params = tmp_path / "spec.json"
        assert run("fit", "--triplets", trip, "--estimator", "spec", "--rank", 3, "--out", params) == 0
        assert load_params(params).dim == 3
        capsys.readouterr()
        report = tmp_path / "eval.csv"
        assert run("eval", "--model", params, "--truth", model, "--n-test", 20,
                   "--out", report) == 0
        printed = capsys.readouterr().out.split()
        assert printed[0] == "relnorm" and printed[2] == "prederr"
        assert report.read_text().startswith("metric,value,n_excluded")

    def test_m_fit_writes_trace(self, ring_files, tmp_path):
        trip, _ = ring_files
        out = tmp_path / "m.json"
        code = run("--threads", 2, "fit", "--triplets", trip, "--estimator", "m", "--rank", 2,
                   "--lambda", 0.01, "--restarts", 1, "--outer-max-iters", 2, "--out", out)
        assert code == 0
        trace = json.loads((tmp_path / "m.trace.json").read_text())
        assert trace["config"]["lambda"] == 0.01
        assert trace["config"]["n_random_restarts"] == 1
        assert len(trace["selection_losses"]) == 2
        assert load_params(out).b_ops.shape == (5, 5, 5)

    def test_config_file(self, ring_files, tmp_path):
        trip, _ = ring_files
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"lambda": 0.5, "n_random_restarts": 0, "outer_max_iters": 1}))
        run("fit", "--triplets", trip, "--estimator", "m", "--rank", 2, "--config", cfg,
            "--out", tmp_path / "m.json")
        trace = json.loads((tmp_path / "m.trace.json").read_text())
        assert trace["config"]["lambda"] == 0.5 and trace["config"]["rank"] == 2

    def test_fit_is_deterministic(self, ring_files, tmp_path):
        trip, _ = ring_files
        for name in ("a", "b"):
            run("fit", "--triplets", trip, "--estimator", "m", "--rank", 2, "--restarts", 1,
                "--outer-max-iters", 2, "--out", tmp_path / f"{name}.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_rank_above_alphabet(self, ring_files, tmp_path):
        trip, _ = ring_files
        assert run("fit", "--triplets", trip, "--estimator", "spec", "--rank", 6,
                   "--out", tmp_path / "x.json") == 1

    def test_unsupported_rank_is_numerical(self, tmp_path):
        trip = tmp_path / "s.txt"
        run("simulate", "--scenario", "string", "--length", 10, "--out", trip)
        assert run("fit", "--triplets", trip, "--estimator", "spec", "--rank", 2, "--n-obs", 2,
                   "--out", tmp_path / "x.json") == 2

    def test_relnorm_needs_truth(self, ring_files, tmp_path):
        trip, _ = ring_files
        params = tmp_path / "spec.json"
        run("fit", "--triplets", trip, "--estimator", "spec", "--rank", 3, "--out", params)
        assert run("eval", "--model", params, "--metric", "relnorm") == 1

    def test_eval_on_sequence_file(self, ring_files, tmp_path, capsys):
        trip, _ = ring_files
        params = tmp_path / "spec.json"
        run("fit", "--triplets", trip, "--estimator", "spec", "--rank", 3, "--out", params)
        seqs = tmp_path / "test.txt"
        seqs.write_text("0 1 2 3\n4 0 1\n")
        capsys.readouterr()
        assert run("eval", "--model", params, "--test-seqs", seqs, "--metric", "prederr") == 0
        value = float(capsys.readouterr().out.split()[1])
        assert 0.0 <= value <= 1.0

    def test_missing_file(self, tmp_path):
        assert run("fit", "--triplets", tmp_path / "none.txt", "--estimator", "spec", "--rank", 1,
                   "--out", tmp_path / "x.json") == 1


class TestParser:
    def test_unknown_flag(self):
        assert run("simulate", "--scenario", "ring", "--out", "x", "--colour", "red") == 1

    def test_missing_subcommand(self):
        assert main([]) == 1

    @pytest.mark.parametrize("cmd", ["simulate", "fit", "eval", "repro"])
    def test_help(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([cmd, "--help"])
        assert exc.value.code == 0
        assert "--" in capsys.readouterr().out

    def test_console_entry(self):
        res = subprocess.run([sys.executable, "-m", "specmoment.cli", "--version"],
                             capture_output=True, text=True)
        assert res.returncode == 0 and res.stdout.startswith("specmoment")


class TestRepro:
    def test_experiment_shapes(self):
        assert [c.label for c in experiment_configs("ring", 0)] == ["rank4", "rank3", "rank2"]
        assert [c.params["p_reset"] for c in experiment_configs("chain", 0)] == [0.1, 0.3, 0.5]
        assert set(EXPERIMENTS) == {"string", "ring", "grid", "chain", "synthetic"}

    def test_string_table(self, tmp_path, capsys):
        assert run("repro", "--experiment", "string", "--out", tmp_path) == 0
        lines = (tmp_path / "string.csv").read_text().splitlines()
        assert lines[0] == "setting,estimator,metric,mean,se,n_ok,n_failed"
        assert len(lines) == 1 + 4 * 2
        doc = json.loads((tmp_path / "string.json").read_text())
        assert doc["experiment"] == "string" and "provenance" in doc
        assert capsys.readouterr().out.splitlines() == lines

    @pytest.mark.slow
    def test_ring_determinism_small(self, tmp_path):
        for name in ("a", "b"):
            run("repro", "--experiment", "ring", "--replicates", 1, "--seed", 7,
                "--out", tmp_path / name)
        a = (tmp_path / "a" / "ring.csv").read_bytes()
        assert a == (tmp_path / "b" / "ring.csv").read_bytes()
        assert len(a.decode().splitlines()) == 1 + 3 * 3 * 2
        assert not np.isnan(float(a.decode().splitlines()[1].split(",")[3]))
