"""Tests for Wald statistics, batch permutation tests and the relative-abundance baseline."""

import math

import numpy as np
import pytest
from scipy import stats

from batchmiss.config import FitConfig
from batchmiss.covariance import marginal_covariance
from batchmiss.ecm import FitResult, alpha_covariance, fit
from batchmiss.inference import (
    BaselineError,
    WaldError,
    _flag_unreliable,
    _p_values,
    draw_permutation,
    permutation_test,
    relative_abundance_baseline,
    size_groups,
    wald_statistics,
)
from batchmiss.models import BatchDesign, FeatureBatchData, MissingMechanism, ModelParameters
from batchmiss.simulation import Scenario, simulate_study
from tests.conftest import reference_design

MAR = MissingMechanism.exponential(0.0, 0.0)

Feature = tuple[FeatureBatchData, tuple[BatchDesign, ...]]


def _result(alpha: list[float], cov: list[list[float]]) -> FitResult:
    return FitResult(
        params=ModelParameters(alpha=alpha, sigma0_sq=1.0, sigma_sq=1.0, d=[[1.0]]),
        alpha_cov=np.array(cov),
        n_iter=1,
        converged=True,
        loglik_trace=(),
        clamp_warnings=0,
        mechanism=MAR,
    )


def test_wald_statistic_is_estimate_over_standard_error() -> None:
    result = _result([0.5, 0.0], [[0.0625, 0.0], [0.0, 1.0]])

    np.testing.assert_allclose(wald_statistics(result, [0, 1]), [2.0, 0.0])
    np.testing.assert_allclose(result.alpha_se, [0.25, 1.0])


def test_wald_statistic_rejects_zero_variance() -> None:
    with pytest.raises(WaldError, match="non-positive variance"):
        wald_statistics(_result([1.0], [[0.0]]), [0])


def test_alpha_covariance_with_identity_design_is_sigma() -> None:
    design = BatchDesign(x=np.eye(3), z=np.ones((3, 1)))
    params = ModelParameters(alpha=np.zeros(3), sigma0_sq=1.0, sigma_sq=2.0, d=[[0.5]])
    data = FeatureBatchData.from_values([[1.0, 2.0, 3.0]])

    cov = alpha_covariance(params, [design], data)

    np.testing.assert_allclose(cov, marginal_covariance(params, design))


def test_p_value_counting() -> None:
    np.testing.assert_allclose(_p_values(np.array([0, 999]), 999, 0), [0.001, 1.0])
    np.testing.assert_allclose(_p_values(np.array([0]), 999, 99), [1.0 / 901.0])
    assert math.isnan(_p_values(np.array([0]), 0, 0)[0])


def test_unreliable_above_five_percent_failures() -> None:
    assert not _flag_unreliable("f", 100, 5)
    assert _flag_unreliable("f", 100, 6)


def test_permutations_stay_within_equal_size_batches() -> None:
    designs = [reference_design(4), reference_design(3), reference_design(4), reference_design(3)]
    groups = size_groups(designs)
    rng = np.random.default_rng(0)

    assert [g.tolist() for g in groups] == [[1, 3], [0, 2]]
    for _ in range(20):
        order = draw_permutation(groups, 4, rng)
        assert sorted(order.tolist()) == [0, 1, 2, 3]
        assert {int(order[0]), int(order[2])} == {0, 2}
        assert {int(order[1]), int(order[3])} == {1, 3}


def test_permutation_test_is_reproducible(complete_feature: Feature) -> None:
    data, designs = complete_feature
    names = ["intercept", "reference", "group"]

    first = permutation_test(data, designs, MAR, FitConfig(), [2], 19, seed=5, names=names)
    again = permutation_test(data, designs, MAR, FitConfig(), [2], 19, seed=5, names=names)

    group = first.by_name("group")
    assert group.p_perm == again.by_name("group").p_perm
    assert 1.0 / 20.0 <= group.p_perm <= 1.0
    assert group.index == 2
    assert group.wald_z == pytest.approx(group.estimate / group.std_error)
    assert first.fit is not None and first.fit.converged
    assert first.n_failed == 0 and not first.unreliable


def test_permutation_test_without_permutations(complete_feature: Feature) -> None:
    data, designs = complete_feature

    result = permutation_test(data, designs, MAR, None, [1, 2], 0, seed=1)

    assert [c.name for c in result.coefficients] == ["x1", "x2"]
    assert all(math.isnan(c.p_perm) for c in result.coefficients)
    with pytest.raises(KeyError):
        result.by_name("group")


def test_permutation_test_rejects_negative_count(complete_feature: Feature) -> None:
    data, designs = complete_feature

    with pytest.raises(ValueError, match="permutations"):
        permutation_test(data, designs, MAR, None, [2], -1, seed=1)


def test_baseline_with_targets_equal_to_reference(complete_feature: Feature) -> None:
    _, designs = complete_feature
    data = FeatureBatchData.from_values([np.full(4, 10.0 + i) for i in range(len(designs))])

    result = relative_abundance_baseline(data, designs, [2], 9, seed=3)

    coefficient = result.coefficients[0]
    assert coefficient.estimate == pytest.approx(0.0, abs=1e-12)
    assert coefficient.wald_z == 0.0
    assert coefficient.p_perm == 1.0


def test_baseline_recovers_group_effect(complete_feature: Feature) -> None:
    data, designs = complete_feature

    result = relative_abundance_baseline(data, designs, [2], 0, seed=3, names=["i", "r", "g"])

    g = result.by_name("g")
    assert abs(g.estimate - 0.8) < 4.0 * g.std_error
    assert result.fit is None


def test_baseline_reports_untestable_column_as_nan(complete_feature: Feature) -> None:
    data, designs = complete_feature

    result = relative_abundance_baseline(data, designs, [1, 2], 0, seed=3)

    assert math.isnan(result.coefficients[0].estimate)
    assert math.isfinite(result.coefficients[1].estimate)


def test_baseline_needs_an_observed_reference(complete_feature: Feature) -> None:
    _, designs = complete_feature
    data = FeatureBatchData.from_values([[np.nan, 1.0, 2.0, 3.0]] * len(designs), feature_id="x")

    with pytest.raises(BaselineError, match="reference"):
        relative_abundance_baseline(data, designs, [2], 0, seed=3)


def test_wald_statistic_is_invariant_to_column_scaling(complete_feature: Feature) -> None:
    data, designs = complete_feature
    scale = 3.7
    scaled = []
    for design in designs:
        x = design.x.copy()
        x[:, 2] *= scale
        scaled.append(BatchDesign(x=x, z=design.z, reference_channel=design.reference_channel))
    config = FitConfig(max_iter=5000, tol=1e-12)

    base = fit(data, designs, MAR, config)
    other = fit(data, scaled, MAR, config)

    np.testing.assert_allclose(
        wald_statistics(other, [1, 2]), wald_statistics(base, [1, 2]), rtol=0.0, atol=1e-8
    )
    assert other.params.alpha[2] == pytest.approx(base.params.alpha[2] / scale, rel=1e-8)


def test_alpha_covariance_inverts_observed_information(complete_feature: Feature) -> None:
    complete, designs = complete_feature
    batches = [b.copy() for b in complete.batches]
    batches[2][:] = np.nan
    batches[5][:] = np.nan
    batches[4][1] = np.nan
    batches[8][0] = np.nan
    data = FeatureBatchData.from_values(batches)

    result = fit(data, designs, MissingMechanism.exponential(0.0, 0.1))

    info = np.zeros((3, 3))
    for i in data.observed_indices:
        keep = data.sporadic_mask[i]
        x = designs[i].x[keep]
        sigma = marginal_covariance(result.params, designs[i])[np.ix_(keep, keep)]
        info += x.T @ np.linalg.solve(sigma, x)
    np.testing.assert_allclose(
        np.linalg.inv(result.alpha_cov), info, rtol=1e-10, atol=1e-10 * np.abs(info).max()
    )


def test_permutation_p_values_are_uniform_under_the_null() -> None:
    scenario = Scenario(name="null", q=10, a=0.0, sporadic_rate=0.0, seed=404)
    study = simulate_study(scenario, 60).to_study_data(min_ref_obs_frac=0.0)

    p_values = [
        permutation_test(
            feature, study.designs, scenario.mechanism, FitConfig(), [2], 19, seed=j
        ).coefficients[0].p_perm
        for j, feature in enumerate(study.features)
    ]

    assert len(p_values) >= 50
    assert stats.kstest(p_values, "uniform").pvalue > 1e-3
    assert 0.35 <= float(np.mean(p_values)) <= 0.65
