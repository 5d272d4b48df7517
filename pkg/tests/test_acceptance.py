"""Full-scale simulation checks. Run with ``pytest -m slow``."""

import asyncio
import os
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from batchmiss.config import BatchmissConfig, FitConfig
from batchmiss.ecm import fit
from batchmiss.mechanism import marginal_missing_prob
from batchmiss.models import MissingMechanism
from batchmiss.simulation import (
    PRESETS,
    Scenario,
    generate_replicate,
    run_table1,
    run_table2,
    run_table3,
    simulate_study,
)
from batchmiss.study import StudyRunner

pytestmark = pytest.mark.slow

WORKERS = os.cpu_count() or 1


def _rate(frame: pd.DataFrame, method: str, cutoff: float) -> float:
    row = frame[(frame["method"] == method) & (frame["cutoff"] == cutoff)]
    return float(row["rejection_rate"].iloc[0])


@pytest.mark.parametrize(("q", "low", "high"), [(40, 0.75, 0.95), (200, 0.40, 0.60)])
def test_exponential_fit_improves_alpha_mse(q: int, low: float, high: float) -> None:
    frame = run_table2(PRESETS[f"table2-q{q}"], logit=False, workers=WORKERS)

    row = frame.iloc[0]
    assert low <= row["rel_mse_alpha"] <= high
    for name in ("sigma0_sq", "sigma_sq", "d"):
        assert 0.90 <= row[f"rel_mse_{name}"] <= 1.25


def test_logit_analysis_of_exponential_data() -> None:
    scenario = PRESETS["table2-q40"].with_overrides(n_replicates=200)

    frame = run_table2(scenario, logit=True, workers=WORKERS).set_index("method")

    assert 0.75 <= frame.loc["logit", "rel_mse_alpha"] <= 0.95


@pytest.mark.parametrize(
    "name",
    [
        "table1-q40-large-null",
        "table1-q40-small-null",
        "table1-q200-large-null",
        "table1-q200-small-null",
    ],
)
def test_type_one_error_is_controlled(name: str) -> None:
    frame = run_table1([PRESETS[name]], permutations=999, workers=WORKERS)

    for method in ("mixemm_badmm", "mixemm_mar", "relative_abundance"):
        assert 0.03 <= _rate(frame, method, 0.05) <= 0.07
        assert 0.004 <= _rate(frame, method, 0.01) <= 0.02


def test_power_under_large_and_small_variance() -> None:
    scenarios = [PRESETS["table1-q40-large-power"], PRESETS["table1-q40-small-power"]]

    frame = run_table1(scenarios, permutations=999, workers=WORKERS)

    large = frame[frame["variance"] == "large"]
    small = frame[frame["variance"] == "small"]
    power = _rate(large, "mixemm_badmm", 0.05)
    assert 0.38 <= power <= 0.50
    assert power >= 2 * _rate(large, "relative_abundance", 0.05)
    assert 0.93 <= _rate(small, "mixemm_badmm", 0.05) <= 0.98


def test_available_case_gamma_estimates() -> None:
    frame = run_table3(PRESETS["table3-q40"], n_features=1000, workers=WORKERS)

    rows = frame.set_index("parameter")
    assert 0.095 <= rows.loc["gamma", "mean"] <= 0.107
    assert rows.loc["gamma0", "mean"] < 0.0


def test_batch_missing_rate_matches_marginal_probability() -> None:
    scenario = Scenario(q=40, a=0.0, sporadic_rate=0.0, seed=4)
    study = simulate_study(scenario, 1000)

    missing = np.concatenate([f.batch_missing for f in study.features])
    expected = marginal_missing_prob(scenario.truth, study.designs[0], scenario.mechanism)
    se = np.sqrt(expected * (1 - expected) / missing.size)
    assert abs(missing.mean() - expected) < 3 * se


@pytest.mark.parametrize(
    ("mech", "slack"),
    [(MissingMechanism.exponential(0.0, 0.1), 1e-8), (MissingMechanism.logit(-1.0, 0.1), 1e-6)],
)
def test_loglik_is_monotone_on_many_instances(mech: MissingMechanism, slack: float) -> None:
    scenario = Scenario(name="monotone", q=20, seed=2024)

    for r in range(100):
        rep = generate_replicate(scenario, r)
        result = fit(rep.data, rep.designs, mech, FitConfig(max_iter=300))
        assert np.diff(result.loglik_trace).min() >= -slack, r


def test_profile_maximum_is_within_one_grid_step_of_truth(tmp_path: Path) -> None:
    scenario = Scenario(name="profile", q=40, intercept_sd=2.0, sporadic_rate=0.0, seed=77)
    study = simulate_study(scenario, 150).to_study_data(min_ref_obs_frac=0.0)
    config = BatchmissConfig()
    config.mechanism.source = "profiled"
    config.mechanism.profile_grid = "0:0.25:0.05"
    config.inference.permutations = 0
    config.run.threads = WORKERS

    result = asyncio.run(StudyRunner(config).run(study, tmp_path))

    assert result.profile_best is not None
    assert result.profile[result.profile_best].n_failed == 0
    assert abs(result.mechanism.gamma - scenario.gamma) <= 0.05 + 1e-9
