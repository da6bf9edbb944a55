import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from mqre import (
    DatasetSchema,
    InputError,
    SimConfig,
    fit_mqre,
    generate_population,
    informative_sample,
    read_dataset,
    write_design_csv,
)
from mqre.cli import main, significance_stars
from mqre.sim import census_target, replicate_rng

SCHEMA_DIR = Path(__file__).resolve().parents[1] / "src" / "mqre" / "schemas"

SCHEMA = DatasetSchema(
    response="y",
    covariates=("x",),
    cluster="school",
    unit_weight="w_unit",
    cluster_weight="w_cluster",
)


@pytest.fixture(scope="module")
def sim_sample():
    config = SimConfig()
    pop = generate_population(config, replicate_rng(21, 0))
    design, _ = informative_sample(pop, config, replicate_rng(21, 1))
    return config, pop, design


@pytest.fixture(scope="module")
def sample_csv(sim_sample, tmp_path_factory):
    _, _, design = sim_sample
    path = tmp_path_factory.mktemp("data") / "sample.csv"
    write_design_csv(design, path, SCHEMA)
    return path


class TestDataIO:
    def test_round_trip_is_bit_identical(self, sim_sample, tmp_path):
        _, _, design = sim_sample
        path = tmp_path / "design.csv"
        write_design_csv(design, path, SCHEMA)
        back, dropped = read_dataset(path, SCHEMA)
        assert dropped == 0
        assert back.X.tobytes() == design.X.tobytes()
        assert back.y.tobytes() == design.y.tobytes()
        assert back.w1.tobytes() == design.w1.tobytes()
        assert back.w2.tobytes() == design.w2.tobytes()
        spec = SimConfig().spec(0.25)
        fit_a = fit_mqre(design, spec, compute_se=False)
        fit_b = fit_mqre(back, spec, compute_se=False)
        assert fit_a.beta.tobytes() == fit_b.beta.tobytes()

    def test_missing_column_reported(self, sample_csv):
        schema = DatasetSchema(response="score", covariates=("x",), cluster="school")
        with pytest.raises(InputError, match="score"):
            read_dataset(sample_csv, schema)

    def test_missing_values_dropped_with_count(self, tmp_path):
        path = tmp_path / "holes.csv"
        path.write_text(
            "school,y,x\n"
            "a,1.0,2.0\na,,3.0\na,2.0,1.0\na,3.0,NA\n"
            "b,1.5,0.5\nb,2.5,1.5\n",
            encoding="utf-8",
        )
        design, dropped = read_dataset(
            path, DatasetSchema(response="y", covariates=("x",), cluster="school")
        )
        assert dropped == 2
        assert design.n == 4 and design.m == 2

    def test_non_numeric_value_reports_row_and_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("school,y,x\na,1.0,2.0\na,oops,3.0\n", encoding="utf-8")
        with pytest.raises(InputError, match=r"row 3.*'y'"):
            read_dataset(path, DatasetSchema(response="y", covariates=("x",), cluster="school"))

    def test_nonconstant_cluster_weight_rejected(self, tmp_path):
        path = tmp_path / "w2.csv"
        path.write_text(
            "school,y,x,w2\na,1.0,2.0,3.0\na,2.0,1.0,4.0\nb,1.0,1.0,2.0\nb,2.0,2.0,2.0\n",
            encoding="utf-8",
        )
        with pytest.raises(InputError, match="not constant"):
            read_dataset(
                path,
                DatasetSchema(
                    response="y", covariates=("x",), cluster="school",
                    cluster_weight="w2",
                ),
            )


class TestSignificanceStars:
    @pytest.mark.parametrize(
        "p,stars",
        [(0.005, "***"), (0.02, "**"), (0.07, "*"), (0.2, ""), (None, "")],
    )
    def test_thresholds(self, p, stars):
        assert significance_stars(p) == stars


class TestCliFit:
    def base_args(self, sample_csv):
        return [
            "fit", str(sample_csv),
            "--response", "y", "--covariates", "x", "--cluster", "school",
            "--unit-weight", "w_unit", "--cluster-weight", "w_cluster",
        ]

    def test_fit_within_three_se_of_census_target(self, sim_sample, sample_csv, tmp_path, capsys):
        config, pop, _ = sim_sample
        out = tmp_path / "fitout"
        rc = main(
            self.base_args(sample_csv)
            + ["--quantiles", "0.1,0.25,0.5", "--out-dir", str(out), "--no-figures",
               "--format", "json"]
        )
        assert rc == 0
        report = json.loads((out / "fit_report.json").read_text())
        for entry in report["fits"]:
            target = census_target(pop, config.spec(entry["q"])).beta
            for coef, tgt in zip(entry["coefficients"], target):
                assert abs(coef["estimate"] - tgt) <= 3.0 * coef["se"]
        capsys.readouterr()

    def test_json_output_validates_against_schema(self, sample_csv, capsys):
        rc = main(
            self.base_args(sample_csv) + ["--quantiles", "0.25,0.5", "--format", "json"]
        )
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        schema = json.loads((SCHEMA_DIR / "fit_report.schema.json").read_text())
        jsonschema.validate(payload, schema)

    def test_scaling_is_noop_for_unit_weights(self, sim_sample, tmp_path, capsys):
        _, _, design = sim_sample
        unit = design.with_unit_weights()
        path = tmp_path / "unit.csv"
        write_design_csv(unit, path, SCHEMA)
        args = [
            "fit", str(path),
            "--response", "y", "--covariates", "x", "--cluster", "school",
            "--unit-weight", "w_unit", "--cluster-weight", "w_cluster",
            "--quantiles", "0.5", "--format", "csv",
        ]
        assert main(args + ["--scale", "none"]) == 0
        out_none = capsys.readouterr().out
        assert main(args + ["--scale", "method2"]) == 0
        out_m2 = capsys.readouterr().out
        assert out_none == out_m2

    def test_malformed_header_exits_2(self, sample_csv, capsys):
        rc = main(
            ["fit", str(sample_csv), "--response", "nope", "--covariates", "x",
             "--cluster", "school"]
        )
        assert rc == 2
        assert "nope" in capsys.readouterr().err

    def test_unreadable_file_exits_2(self, tmp_path, capsys):
        rc = main(
            ["fit", str(tmp_path / "absent.csv"), "--response", "y",
             "--covariates", "x", "--cluster", "school"]
        )
        assert rc == 2
        capsys.readouterr()

    def test_nonconvergence_exit_code_and_override(self, sample_csv, capsys):
        args = self.base_args(sample_csv) + ["--quantiles", "0.5", "--max-iter", "1"]
        assert main(args) == 1
        capsys.readouterr()
        assert main(args + ["--allow-nonconverged"]) == 0
        capsys.readouterr()

    def test_figures_written(self, sample_csv, tmp_path, capsys):
        out = tmp_path / "figs"
        rc = main(
            self.base_args(sample_csv) + ["--quantiles", "0.25,0.5", "--out-dir", str(out)]
        )
        assert rc == 0
        assert (out / "coefficient_profiles.png").stat().st_size > 0
        assert (out / "coefficients.csv").exists()
        capsys.readouterr()


class TestCliSimulate:
    COMMON = [
        "simulate", "--replications", "4", "--seed", "42",
        "--quantiles", "0.25,0.5",
    ]

    def test_identical_bytes_for_fixed_seed(self, tmp_path, capsys):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            rc = main(self.COMMON + ["--out-dir", str(out), "--no-figures"])
            assert rc == 0
            outs.append(
                (
                    (out / "sim_report.json").read_bytes(),
                    (out / "sim_summary.csv").read_bytes(),
                    (out / "sim_tables.txt").read_bytes(),
                )
            )
            capsys.readouterr()
        assert outs[0] == outs[1]

    def test_json_validates_against_schema(self, capsys):
        rc = main(self.COMMON + ["--format", "json"])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        schema = json.loads((SCHEMA_DIR / "sim_report.schema.json").read_text())
        jsonschema.validate(payload, schema)
        assert payload["rng_algorithm"] == "philox4x64"
        assert payload["config"]["seed"] == 42

    def test_figures_written(self, tmp_path, capsys):
        out = tmp_path / "simfigs"
        rc = main(self.COMMON + ["--out-dir", str(out)])
        assert rc == 0
        assert (out / "sim_arb.png").stat().st_size > 0
        assert (out / "sim_se.png").stat().st_size > 0
        capsys.readouterr()

    def test_invalid_quantiles_exit_2(self, capsys):
        rc = main(["simulate", "--quantiles", "1.5", "--replications", "1"])
        assert rc == 2
        capsys.readouterr()
