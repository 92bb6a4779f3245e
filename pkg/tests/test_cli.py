import json
from importlib import resources

import numpy as np
import pytest
from click.testing import CliRunner

from refbased import write_csv
from refbased.cli import main

from conftest import make_monotone_dataset


@pytest.fixture(scope="module")
def trial_csv(tmp_path_factory):
    data = make_monotone_dataset(seed=63, n_per_arm=45, dropout_prob=0.08)
    path = tmp_path_factory.mktemp("cli") / "trial.csv"
    write_csv(data, path)
    return str(path)


@pytest.fixture(scope="module")
def smoke_scenario_file(tmp_path_factory):
    src = resources.files("refbased").joinpath("scenarios", "high_alt.toml")
    text = src.read_text()
    text = text.replace("n_per_arm = 250", "n_per_arm = 50")
    text = text.replace("replications = 1000", "replications = 2")
    text = text.replace("iterations = 5200", "iterations = 350")
    text = text.replace("burn_in = 200", "burn_in = 50")
    text = text.replace("imputations = 100", "imputations = 10")
    text = text.replace("oracle_draws = 1000000", "oracle_draws = 20000")
    text = text.replace(
        'estimators = [\n    "rubin:j2r", "rubin:cir",\n    "condmean:j2r", "condmean:cir",\n',
        'estimators = [\n    "rubin:j2r",\n',
    )
    path = tmp_path_factory.mktemp("scen") / "smoke.toml"
    path.write_text(text)
    return str(path)


SCHEDULE = "0,4,8,14,20,26"


def run_cli(*args):
    return CliRunner().invoke(main, list(args), catch_exceptions=False)


class TestAnalyze:
    def test_condmean_runs_and_writes_outputs(self, trial_csv, tmp_path):
        out = tmp_path / "o1"
        res = run_cli(
            "analyze",
            "--data", trial_csv,
            "--schedule", SCHEDULE,
            "--method", "condmean:j2r",
            "--out-dir", str(out),
        )
        assert res.exit_code == 0, res.output
        assert (out / "analysis.csv").exists()
        assert (out / "analysis.json").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "analyze"
        assert manifest["config"]["method"] == "condmean:j2r"
        header, row = (out / "analysis.csv").read_text().splitlines()
        assert header == "method,point,se,ci_low,ci_high,m"
        assert row.startswith("condmean:j2r,")

    def test_bcm_with_point_prior(self, trial_csv, tmp_path):
        out = tmp_path / "o2"
        res = run_cli(
            "analyze",
            "--data", trial_csv,
            "--schedule", SCHEDULE,
            "--method", "bcm",
            "--prior", "point:0",
            "--draws", "300",
            "--burn-in", "50",
            "--out-dir", str(out),
        )
        assert res.exit_code == 0, res.output
        assert "bcm:point:0" in res.output

    def test_bcm_requires_prior(self, trial_csv, tmp_path):
        res = CliRunner().invoke(
            main,
            [
                "analyze",
                "--data", trial_csv,
                "--schedule", SCHEDULE,
                "--method", "bcm",
                "--out-dir", str(tmp_path / "x"),
            ],
        )
        assert res.exit_code == 2

    def test_malformed_prior_is_usage_error(self, trial_csv, tmp_path):
        res = CliRunner().invoke(
            main,
            [
                "analyze",
                "--data", trial_csv,
                "--schedule", SCHEDULE,
                "--method", "bcm",
                "--prior", "normal:0",
                "--out-dir", str(tmp_path / "x"),
            ],
        )
        assert res.exit_code == 2
        assert "prior" in res.output

    def test_bad_data_is_exit_three(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("id,arm,y0,y1\np1,active,,1.0\np2,active,1,2\nr1,reference,1,2\nr2,reference,1,2\n")
        res = CliRunner().invoke(
            main,
            [
                "analyze",
                "--data", str(bad),
                "--schedule", "0,4",
                "--method", "condmean:j2r",
                "--out-dir", str(tmp_path / "x"),
            ],
        )
        assert res.exit_code == 3

    def test_dump_draws(self, trial_csv, tmp_path):
        out = tmp_path / "o3"
        res = run_cli(
            "analyze",
            "--data", trial_csv,
            "--schedule", SCHEDULE,
            "--method", "bcm",
            "--prior", "point:0",
            "--draws", "120",
            "--burn-in", "30",
            "--dump-draws",
            "--out-dir", str(out),
        )
        assert res.exit_code == 0, res.output
        lines = (out / "draws.csv").read_text().splitlines()
        assert lines[0] == "draw,arm,param,visit_i,visit_j,value"


class TestStudy:
    def test_smoke_run_and_byte_identical_rerun(self, smoke_scenario_file, tmp_path):
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        for out in (out1, out2):
            res = run_cli(
                "study",
                "--scenario", smoke_scenario_file,
                "--threads", "1",
                "--out-dir", str(out),
            )
            assert res.exit_code == 0, res.output
        assert (out1 / "summary.csv").read_bytes() == (out2 / "summary.csv").read_bytes()
        assert (
            out1 / "replications.csv"
        ).read_bytes() == (out2 / "replications.csv").read_bytes()

    def test_single_rep_smoke(self, smoke_scenario_file, tmp_path):
        out = tmp_path / "s3"
        res = run_cli(
            "study",
            "--scenario", smoke_scenario_file,
            "--reps", "2",
            "--estimators", "bcm:point:0",
            "--threads", "1",
            "--out-dir", str(out),
        )
        assert res.exit_code == 0, res.output
        lines = (out / "replications.csv").read_text().splitlines()
        assert len(lines) == 3  # header + 2 reps x 1 estimator

    def test_bundled_scenario_name_resolves(self, tmp_path):
        out = tmp_path / "s4"
        res = run_cli(
            "study",
            "--scenario", "high_alt",
            "--reps", "2",
            "--seed", "5",
            "--estimators", "bcm:point:0",
            "--threads", "1",
            "--out-dir", str(out),
        )
        assert res.exit_code == 0, res.output

    def test_unknown_scenario_is_usage_error(self, tmp_path):
        res = CliRunner().invoke(
            main, ["study", "--scenario", "nope", "--out-dir", str(tmp_path)]
        )
        assert res.exit_code == 2


class TestSweep:
    def test_sd_non_decreasing_and_point_constant(self, trial_csv, tmp_path):
        out = tmp_path / "w1"
        res = run_cli(
            "sweep",
            "--data", trial_csv,
            "--schedule", SCHEDULE,
            "--prior-mean", "0",
            "--sigmas", "0,0.1,0.5,1.0,1.5",
            "--draws", "400",
            "--burn-in", "80",
            "--out-dir", str(out),
        )
        assert res.exit_code == 0, res.output
        rows = (out / "sweep.csv").read_text().splitlines()[1:]
        vals = np.array([[float(x) for x in r.split(",")] for r in rows])
        assert np.all(np.diff(vals[:, 2]) >= 0)  # sd column
        assert np.allclose(vals[:, 1], vals[0, 1])  # point column

    def test_sigma_zero_matches_analyze_point_prior(self, trial_csv, tmp_path):
        out1, out2 = tmp_path / "w2", tmp_path / "w3"
        res1 = run_cli(
            "sweep",
            "--data", trial_csv,
            "--schedule", SCHEDULE,
            "--prior-mean", "0",
            "--sigmas", "0",
            "--draws", "300",
            "--burn-in", "60",
            "--seed", "3",
            "--out-dir", str(out1),
        )
        res2 = run_cli(
            "analyze",
            "--data", trial_csv,
            "--schedule", SCHEDULE,
            "--method", "bcm",
            "--prior", "point:0",
            "--draws", "300",
            "--burn-in", "60",
            "--seed", "3",
            "--out-dir", str(out2),
        )
        assert res1.exit_code == 0 and res2.exit_code == 0
        sweep_point = float((out1 / "sweep.csv").read_text().splitlines()[1].split(",")[1])
        analyze_point = float(
            (out2 / "analysis.csv").read_text().splitlines()[1].split(",")[1]
        )
        assert sweep_point == pytest.approx(analyze_point, abs=1e-12)

    def test_negative_sigma_rejected(self, trial_csv, tmp_path):
        res = CliRunner().invoke(
            main,
            [
                "sweep",
                "--data", trial_csv,
                "--schedule", SCHEDULE,
                "--sigmas", "-0.1,0.5",
                "--out-dir", str(tmp_path / "x"),
            ],
        )
        assert res.exit_code == 2


class TestOracle:
    def test_null_scenario_gives_zero(self, tmp_path):
        out = tmp_path / "z1"
        res = run_cli(
            "oracle",
            "--scenario", "high_null",
            "--k0", "0,0.5,1",
            "--n-mc", "20000",
            "--out-dir", str(out),
        )
        assert res.exit_code == 0, res.output
        rows = (out / "oracle.csv").read_text().splitlines()[1:]
        for row in rows:
            assert float(row.split(",")[1]) == 0.0

    def test_high_scenario_values(self, tmp_path):
        out = tmp_path / "z2"
        res = run_cli(
            "oracle",
            "--scenario", "high_alt",
            "--k0", "0,0.5,1",
            "--n-mc", "400000",
            "--out-dir", str(out),
        )
        assert res.exit_code == 0, res.output
        rows = (out / "oracle.csv").read_text().splitlines()[1:]
        effects = [float(r.split(",")[1]) for r in rows]
        assert effects == pytest.approx([-0.388, -0.508, -0.628], abs=0.01)


class TestTrajectories:
    def test_k_zero_equals_reference_after_pattern(self, tmp_path):
        out = tmp_path / "t1"
        res = run_cli(
            "trajectories",
            "--scenario", "high_alt",
            "--pattern", "2",
            "--k", "0",
            "--out-dir", str(out),
        )
        assert res.exit_code == 0, res.output
        rows = (out / "trajectories.csv").read_text().splitlines()[1:]
        means = [float(r.split(",")[3]) for r in rows]
        assert means[3:] == pytest.approx([7.80, 7.78, 7.78])
        assert means[:3] == pytest.approx([7.92, 7.55, 7.20])

    def test_three_k_shapes(self, tmp_path):
        out = tmp_path / "t2"
        res = run_cli(
            "trajectories",
            "--scenario", "high_alt",
            "--pattern", "2",
            "--k", "0,0.5,1",
            "--out-dir", str(out),
        )
        rows = (out / "trajectories.csv").read_text().splitlines()[1:]
        by_k = {}
        for r in rows:
            k, visit, week, mean = r.split(",")
            by_k.setdefault(float(k), []).append(float(mean))
        gap = 7.20 - 7.80
        assert by_k[0.0][3] == pytest.approx(7.80)
        assert by_k[0.5][3] == pytest.approx(7.80 + 0.5 * gap)
        assert by_k[1.0][3] == pytest.approx(7.80 + gap)

    def test_decay_converges(self, tmp_path):
        out = tmp_path / "t3"
        res = run_cli(
            "trajectories",
            "--scenario", "high_alt",
            "--pattern", "2",
            "--model", "decay",
            "--k", "0.5",
            "--out-dir", str(out),
        )
        rows = (out / "trajectories.csv").read_text().splitlines()[1:]
        means = [float(r.split(",")[3]) for r in rows]
        gaps = [abs(m - r) for m, r in zip(means[3:], [7.80, 7.78, 7.78])]
        assert gaps[0] > gaps[1] > gaps[2]
