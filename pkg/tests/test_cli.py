"""End-to-end tests of the run and validate commands."""

import csv
import json
import math
from pathlib import Path

import pytest

from src.cli.commands import EXIT_ERROR, EXIT_FAIL, EXIT_PASS, run_command, validate_command
from src.cli.spec_loader import apply_overrides, load_spec
from src.core.exceptions import ParseError
from src.main import main

DATA = Path(__file__).resolve().parent.parent / "data"

SIMULATE_SPEC = """
name = "small-simulate"
kind = "simulate"

[sim]
phi = "arratia"
t = 0.01
dt = 0.0003125
replicas = 50
seed = 17
"""


def _write(tmp_path: Path, text: str, name: str = "spec.toml") -> Path:
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def _rows(path: Path):
    with path.open(newline="", encoding="utf-8") as handle:
        return list(csv.reader(handle))


class TestValidate:
    def test_prints_resolved_config(self, tmp_path, capsys):
        spec = _write(tmp_path, 'name = "v"\nkind = "simulate"\nsim.phi = "gaussian"\nsim.t = 0.01\n')
        assert validate_command(spec) == EXIT_PASS
        echo = json.loads(capsys.readouterr().out)
        assert echo["derived"]["dt"] == pytest.approx(0.01 / 256)
        assert echo["derived"]["n_steps"] == 256
        assert echo["derived"]["grid_points"] == 10
        assert echo["sim"]["t"] == 0.01

    def test_missing_phi(self, tmp_path):
        spec = _write(tmp_path, 'name = "v"\nkind = "simulate"\n[sim]\nt = 0.01\n')
        assert validate_command(spec) == EXIT_ERROR

    def test_alpha_out_of_range(self, tmp_path, caplog):
        spec = _write(tmp_path, 'name = "v"\nkind = "covariance"\n[sim]\nphi = "exp_alpha"\nalpha = 3.0\nt = 1.0\n')
        assert validate_command(spec) == EXIT_ERROR
        assert "(0, 2]" in caplog.text

    def test_missing_file(self, tmp_path):
        assert validate_command(tmp_path / "absent.toml") == EXIT_ERROR

    def test_malformed_toml(self, tmp_path):
        assert validate_command(_write(tmp_path, "name = \n")) == EXIT_ERROR

    @pytest.mark.parametrize("name", sorted(p.name for p in DATA.glob("*.toml")))
    def test_shipped_specs_are_valid(self, name):
        spec = load_spec(DATA / name)
        assert spec.name


class TestOverrides:
    def test_seed_and_replicas_reach_sim_and_analysis(self):
        data = apply_overrides({"sim": {"seed": 1}, "analysis": {"q": 0.5}}, seed=9, replicas=3)
        assert data["sim"]["seed"] == 9
        assert data["analysis"] == {"q": 0.5, "seed": 9, "replicas": 3}

    def test_file_data_is_not_mutated(self):
        original = {"sim": {"seed": 1}}
        apply_overrides(original, seed=2)
        assert original == {"sim": {"seed": 1}}

    def test_invalid_spec_raises_parse_error(self, tmp_path):
        with pytest.raises(ParseError):
            load_spec(_write(tmp_path, 'name = "v"\nkind = "nothing"\n'))


class TestRunSimulate:
    def test_writes_outputs(self, tmp_path):
        out = tmp_path / "out"
        assert run_command(_write(tmp_path, SIMULATE_SPEC), output_dir=out) == EXIT_PASS
        for name in ("paths.csv", "clusters.csv", "trajectories.svg", "report.json"):
            assert (out / name).exists()

        paths = _rows(out / "paths.csv")
        assert paths[0] == ["t", "label", "u", "x", "cluster"]
        assert paths[1][:2] == ["0.0", "0"]
        assert (out / "paths.csv").read_bytes().count(b"\r") == 0

        report = json.loads((out / "report.json").read_text())
        assert report["kind"] == "simulate"
        assert report["seed"] == 17
        assert report["passed"] is True
        assert {v["name"] for v in report["verdicts"]} >= {"monotone_in_label", "sup_below_iid_oracle"}

    def test_runs_are_reproducible(self, tmp_path):
        spec = _write(tmp_path, SIMULATE_SPEC)
        first, second = tmp_path / "a", tmp_path / "b"
        assert run_command(spec, output_dir=first) == EXIT_PASS
        assert run_command(spec, output_dir=second, threads=4) == EXIT_PASS
        for name in ("paths.csv", "clusters.csv"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_seed_override(self, tmp_path):
        spec = _write(tmp_path, SIMULATE_SPEC)
        run_command(spec, seed=1, replicas=5, output_dir=tmp_path / "s1")
        run_command(spec, seed=2, replicas=5, output_dir=tmp_path / "s2")
        report = json.loads((tmp_path / "s1" / "report.json").read_text())
        assert report["seed"] == 1
        assert report["spec"]["sim"]["replicas"] == 5
        assert (tmp_path / "s1" / "paths.csv").read_bytes() != (tmp_path / "s2" / "paths.csv").read_bytes()


class TestRunAnalyses:
    def test_lil_table(self, tmp_path):
        spec = _write(tmp_path, """
name = "small-lil"
kind = "lil"
sim.phi = "arratia"
sim.t = 0.01
sim.dt = 0.000625
sim.replicas = 20
analysis.q = 0.1
analysis.n_min = 2
analysis.n_max = 3
analysis.e_replicas = 200
""")
        out = tmp_path / "lil"
        assert run_command(spec, output_dir=out) in (EXIT_PASS, EXIT_FAIL)
        rows = _rows(out / "lil.csv")
        assert rows[0] == ["t", "mean_sup", "stderr", "ratio_tlogt", "ratio_tloglogt", "E_t", "ratio_centered"]
        assert [float(row[0]) for row in rows[1:]] == pytest.approx([0.01, 0.001])
        report = json.loads((out / "report.json").read_text())
        names = {v["name"] for v in report["verdicts"]}
        for t in ("1.000e-02", "1.000e-03"):
            assert {f"ratio_tlogt[t={t}]", f"sup_vs_iid_oracle[t={t}]", f"E_t_vs_iid_oracle[t={t}]"} <= names
        assert {"monotone_in_label", "cluster_counts_non_increasing"} <= names
        structural = [v for v in report["verdicts"] if v["name"] == "cluster_counts_non_increasing"]
        assert structural[0]["passed"] is True

    def test_continuous_lil_is_compared_with_arratia(self, tmp_path):
        spec = _write(tmp_path, """
name = "small-gaussian-lil"
kind = "lil"
sim.phi = "gaussian"
sim.t = 0.01
sim.dt = 0.000625
sim.replicas = 40
analysis.q = 0.1
analysis.n_min = 2
analysis.n_max = 3
analysis.e_replicas = 200
""")
        out = tmp_path / "glil"
        assert run_command(spec, output_dir=out) in (EXIT_PASS, EXIT_FAIL)
        report = json.loads((out / "report.json").read_text())
        verdicts = {v["name"]: v for v in report["verdicts"]}
        assert verdicts["below_arratia[t=1.000e-03]"]["passed"] is True
        assert verdicts["monotone_in_label"]["passed"] is True
        assert "sup_vs_iid_oracle[t=1.000e-03]" not in verdicts
        assert report["results"]["arratia_reference"]["kind"] == "arratia_reference"

    def test_coupling_checks_structure(self, tmp_path):
        spec = _write(tmp_path, """
name = "small-coupling"
kind = "coupling"
[sim]
phi = "gaussian"
t = 0.01
dt = 0.000625
couple_tangent = true
replicas = 10
[analysis]
q = 0.5
n_min = 7
n_max = 8
""")
        out = tmp_path / "coupling"
        assert run_command(spec, output_dir=out) in (EXIT_PASS, EXIT_FAIL)
        report = json.loads((out / "report.json").read_text())
        verdicts = {v["name"]: v for v in report["verdicts"]}
        assert verdicts["cluster_counts_non_increasing"]["passed"] is True
        assert verdicts["monotone_in_label"]["detail"] == "2 levels"
        assert len(_rows(out / "coupling.csv")) == 3

    def test_comparison_gating(self, tmp_path):
        spec = _write(tmp_path, """
name = "small-comparison"
kind = "comparison"
[analysis]
seed = 4
replicas = 20000
rho_grid = [0.0, 0.5]
dims = [2]
closed_form_replicas = 400000
interpolation_pairs = 1
interpolation_dim = 2
""")
        out = tmp_path / "comparison"
        assert run_command(spec, output_dir=out) in (EXIT_PASS, EXIT_FAIL)
        assert len(_rows(out / "comparison.csv")) == 1 + 3
        interpolation = _rows(out / "interpolation.csv")
        assert interpolation[0][-1] == "refinement_verdict"
        assert interpolation[1][0] == "x1*x2"

        report = json.loads((out / "report.json").read_text())
        verdicts = {v["name"]: v for v in report["verdicts"]}
        closed = sorted(name for name in verdicts if name.startswith("closed_form"))
        assert closed == ["closed_form[rho=0.5]", "closed_form[rho=0]"]
        assert all(verdicts[name]["passed"] for name in closed)
        assert verdicts["closed_form[rho=0]"]["slack"] == pytest.approx(0.01 / math.sqrt(math.pi))
        assert verdicts["interpolation_refinement[0:x1*x2]"]["passed"] is True
        for name in ("submodular[max]", "submodular[linear]", "submodular[min]"):
            assert verdicts[name]["passed"] is True
        assert len([name for name in verdicts if name.startswith("slepian[")]) == 3

    def test_covariance_criteria(self, tmp_path):
        out = tmp_path / "cov"
        assert run_command(DATA / "exp_alpha_covariance.toml", output_dir=out) == EXIT_PASS
        report = json.loads((out / "report.json").read_text())
        assert report["results"]["flow_type"] == "coalescing"
        assert len(_rows(out / "covariance.csv")) == 5

    def test_concentration_table(self, tmp_path):
        spec = _write(tmp_path, """
name = "small-concentration"
kind = "concentration"
[analysis]
seed = 3
replicas = 20000
dims = "1, 10"
lambda_grid = [0.5, 1.0, 2.0]
c_grid = [0.5, 1.0, 2.0]
""")
        out = tmp_path / "conc"
        assert run_command(spec, output_dir=out) == EXIT_PASS
        rows = _rows(out / "concentration.csv")
        assert len(rows) == 1 + 2 * 6
        assert {row[1] for row in rows[1:]} == {"log_mgf", "tail"}


class TestMain:
    def test_validate_through_argparse(self, capsys):
        assert main(["validate", str(DATA / "gaussian_lil.toml"), "--seed", "4"]) == EXIT_PASS
        assert json.loads(capsys.readouterr().out)["derived"]["seed"] == 4

    @pytest.mark.parametrize("argv", [["run"], ["run", "x.toml", "--seed", "-1"], ["run", "x.toml", "--replicas", "0"]])
    def test_bad_arguments(self, argv):
        with pytest.raises(SystemExit) as excinfo:
            main(argv)
        assert excinfo.value.code == 2
