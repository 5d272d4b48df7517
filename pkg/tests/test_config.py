"""Tests for batchmiss configuration loading."""

from pathlib import Path

import pytest

from batchmiss.config import FitConfig, load_config, parse_grid


def _write_config(path: Path, content: str) -> None:
    path.write_text(content, encoding="utf-8")


def test_load_config_without_path_returns_defaults() -> None:
    config = load_config(None)

    assert config.mechanism.form == "exponential"
    assert config.mechanism.source == "fixed"
    assert config.fit == FitConfig()
    assert config.inference.permutations == 999
    assert config.run.min_ref_obs_frac == 0.7


def test_load_config_uses_defaults_for_empty_file(tmp_path: Path) -> None:
    config_path = tmp_path / "config.toml"
    _write_config(config_path, "")

    config = load_config(config_path)

    assert config.fit.max_iter == 500
    assert config.fit.tol == 1e-8
    assert config.inference.tested == []


def test_load_config_reads_sections(tmp_path: Path) -> None:
    config_path = tmp_path / "config.toml"
    _write_config(
        config_path,
        "[mechanism]\nform = \"logit\"\nsource = \"profiled\"\nprofile_grid = \"0:0.2:0.1\"\n"
        "[fit]\nmax_iter = 50\ninit = \"unit\"\n"
        "[inference]\npermutations = 99\ntested = [\"group\"]\n"
        "[run]\nthreads = 4\n",
    )

    config = load_config(config_path)

    assert config.mechanism.form == "logit"
    assert config.mechanism.profile_grid == "0:0.2:0.1"
    assert config.fit.max_iter == 50
    assert config.fit.init == "unit"
    assert config.inference.tested == ["group"]
    assert config.run.threads == 4


def test_load_config_missing_file_raises(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "absent.toml")


def test_load_config_rejects_unknown_key(tmp_path: Path) -> None:
    config_path = tmp_path / "config.toml"
    _write_config(config_path, "[fit]\nmax_iterations = 10\n")

    with pytest.raises(ValueError, match=r"\[fit\] has an unknown key"):
        load_config(config_path)


def test_load_config_rejects_unknown_mechanism_form(tmp_path: Path) -> None:
    config_path = tmp_path / "config.toml"
    _write_config(config_path, "[mechanism]\nform = \"probit\"\n")

    with pytest.raises(ValueError, match=r"\[mechanism\].form"):
        load_config(config_path)


def test_load_config_requires_grid_when_profiling(tmp_path: Path) -> None:
    config_path = tmp_path / "config.toml"
    _write_config(config_path, "[mechanism]\nsource = \"profiled\"\n")

    with pytest.raises(ValueError, match="profile_grid"):
        load_config(config_path)


@pytest.mark.parametrize(
    ("content", "match"),
    [
        ("[fit]\nmax_iter = 0\n", "max_iter"),
        ("[fit]\ntol = 0\n", "tol"),
        ("[run]\nthreads = 0\n", "threads"),
        ("[run]\nmin_ref_obs_frac = 1.5\n", "min_ref_obs_frac"),
        ("[inference]\npermutations = -1\n", "permutations"),
    ],
)
def test_load_config_rejects_out_of_range_values(tmp_path: Path, content: str, match: str) -> None:
    config_path = tmp_path / "config.toml"
    _write_config(config_path, content)

    with pytest.raises(ValueError, match=match):
        load_config(config_path)


def test_parse_grid_is_inclusive() -> None:
    assert parse_grid("0:0.3:0.1") == pytest.approx([0.0, 0.1, 0.2, 0.3])
    assert parse_grid("0.1:0.1:0.05") == [0.1]


@pytest.mark.parametrize("grid", ["0:1", "a:1:0.1", "0:1:0", "1:0:0.1"])
def test_parse_grid_rejects_malformed_grids(grid: str) -> None:
    with pytest.raises(ValueError, match="profile grid"):
        parse_grid(grid)
