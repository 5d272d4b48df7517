"""Tests for the command-line entry points."""

import asyncio
from pathlib import Path

import pytest

from batchmiss.cli import EXIT_INPUT_ERROR, EXIT_OK, build_parser, main, tables_main
from batchmiss.config import BatchmissConfig
from batchmiss.simulation import ALPHA_MSE_DEFINITION, Scenario, export_study, simulate_study
from batchmiss.study import StudyRunner


@pytest.fixture
def workdir(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Path:
    monkeypatch.chdir(tmp_path)
    return tmp_path


def test_parser_rejects_conflicting_gamma_sources() -> None:
    with pytest.raises(SystemExit):
        build_parser().parse_args(
            ["--abundance", "a", "--batch-map", "b", "--estimate-gamma", "--profile-gamma", "0:1:1"]
        )


def test_cli_matches_in_memory_run(workdir: Path, capsys: pytest.CaptureFixture[str]) -> None:
    study = simulate_study(Scenario(name="cli", q=8, seed=13), 6)
    paths = export_study(study, workdir / "input")

    code = main(
        [
            "--abundance",
            str(paths["abundance"]),
            "--batch-map",
            str(paths["batch_map"]),
            "--covariates",
            str(paths["covariates"]),
            "--permutations",
            "9",
            "--seed",
            "3",
            "--min-ref-obs-frac",
            "0",
            "--out",
            str(workdir / "cli"),
        ]
    )

    assert code == EXIT_OK
    assert "features analysed" in capsys.readouterr().out

    config = BatchmissConfig()
    config.inference.permutations = 9
    config.inference.seed = 3
    config.run.min_ref_obs_frac = 0.0
    asyncio.run(StudyRunner(config).run(study.to_study_data(0.0), workdir / "memory"))

    for name in ("results.tsv", "summary.json"):
        assert (workdir / "cli" / name).read_bytes() == (workdir / "memory" / name).read_bytes()


def test_single_point_profile_at_zero_runs(workdir: Path) -> None:
    study = simulate_study(Scenario(name="cli", q=8, seed=13), 4)
    paths = export_study(study, workdir / "input")

    code = main(
        [
            "--abundance",
            str(paths["abundance"]),
            "--batch-map",
            str(paths["batch_map"]),
            "--covariates",
            str(paths["covariates"]),
            "--permutations",
            "9",
            "--min-ref-obs-frac",
            "0",
            "--profile-gamma",
            "0:0:1",
            "--out",
            str(workdir / "out"),
        ]
    )

    assert code == EXIT_OK
    rows = (workdir / "out" / "profile.tsv").read_text(encoding="utf-8").splitlines()
    assert len(rows) == 2
    gamma0, gamma, _loglik, n_failed, best = rows[1].split("\t")
    assert float(gamma) == 0.0
    assert float(gamma0) > 0.0
    assert n_failed == "0"
    assert best == "true"


@pytest.mark.parametrize(
    "extra",
    [
        ["--config", "absent.toml"],
        ["--permutations", "-1"],
        ["--profile-gamma", "0:x:1"],
    ],
)
def test_bad_configuration_exits_with_input_error(
    workdir: Path, capsys: pytest.CaptureFixture[str], extra: list[str]
) -> None:
    code = main(["--abundance", "a.tsv", "--batch-map", "b.tsv", *extra])

    assert code == EXIT_INPUT_ERROR
    assert capsys.readouterr().err.startswith("batchmiss: error:")


def test_missing_input_file_exits_with_input_error(
    workdir: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    code = main(["--abundance", "a.tsv", "--batch-map", "b.tsv"])

    assert code == EXIT_INPUT_ERROR
    assert "input file not found" in capsys.readouterr().err


def test_malformed_input_exits_with_input_error(
    workdir: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    (workdir / "b.tsv").write_text("sample_id\tbatch\n", encoding="utf-8")
    (workdir / "a.tsv").write_text("feature_id\n", encoding="utf-8")

    code = main(["--abundance", "a.tsv", "--batch-map", "b.tsv"])

    assert code == EXIT_INPUT_ERROR
    assert "missing required columns" in capsys.readouterr().err


def test_tables_runs_table3_from_scenario_file(
    workdir: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    (workdir / "scenario.toml").write_text(
        'preset = "table3-q40"\nn_replicates = 2\n', encoding="utf-8"
    )

    code = tables_main(["--table", "3", "--scenario", "scenario.toml", "--features", "200"])

    assert code == EXIT_OK
    lines = (workdir / "tables" / "table3.tsv").read_text(encoding="utf-8").splitlines()
    assert lines[0].split("\t")[:3] == ["q", "parameter", "true_value"]
    assert len(lines) == 3
    assert "Γ estimates, Q = 40" in capsys.readouterr().out


def test_tables_runs_table1_with_overrides(workdir: Path) -> None:
    (workdir / "scenario.toml").write_text(
        'preset = "table1-q40-large-null"\nq = 10\n', encoding="utf-8"
    )

    code = tables_main(
        [
            "--table",
            "1",
            "--scenario",
            "scenario.toml",
            "--replicates",
            "2",
            "--permutations",
            "9",
            "--out",
            "t1",
        ]
    )

    assert code == EXIT_OK
    lines = (workdir / "t1" / "table1.tsv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 7


def test_tables_rejects_bad_scenario(workdir: Path) -> None:
    (workdir / "scenario.toml").write_text("q = 1\n", encoding="utf-8")

    assert tables_main(["--table", "2", "--scenario", "scenario.toml"]) == EXIT_INPUT_ERROR


def test_tables_prints_alpha_mse_definition_with_table2(
    workdir: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    (workdir / "scenario.toml").write_text(
        'preset = "table2-q40"\nq = 10\nn_replicates = 2\n', encoding="utf-8"
    )

    code = tables_main(["--table", "2", "--scenario", "scenario.toml", "--no-logit"])

    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "Relative MSE, Q = 10" in out
    assert ALPHA_MSE_DEFINITION in out
