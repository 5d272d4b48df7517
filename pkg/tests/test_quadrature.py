"""Tests for the logistic-Gaussian quadrature."""

import math

import pytest
from scipy import special

from batchmiss.quadrature import QuadratureError, logistic_gaussian_moments, moments_with_nodes


def test_zero_slope_reduces_to_constant_weight() -> None:
    result = logistic_gaussian_moments(10.0, 3.875, -0.4, 0.0)

    assert result.log_mass == pytest.approx(float(special.log_expit(-0.4)), abs=1e-12)
    assert result.mean == pytest.approx(10.0, abs=1e-10)
    assert result.var == pytest.approx(3.875, rel=1e-9)


@pytest.mark.parametrize(
    ("mean", "var", "offset", "slope"),
    [
        (10.0, 3.875, -1.0, 0.1),
        (10.0, 3.875, 2.0, -0.5),
        (0.0, 0.25, 0.0, 3.0),
        (5.0, 40.0, -4.0, 1.0),
    ],
)
def test_node_doubling_converges(mean: float, var: float, offset: float, slope: float) -> None:
    result = logistic_gaussian_moments(mean, var, offset, slope)
    reference = moments_with_nodes(mean, var, offset, slope, 4096)

    assert result.log_mass == pytest.approx(reference.log_mass, abs=1e-8)
    assert result.mean == pytest.approx(reference.mean, rel=1e-8, abs=1e-8 * math.sqrt(var))
    assert result.var == pytest.approx(reference.var, rel=1e-7)


def test_positive_slope_shifts_mean_upward() -> None:
    result = logistic_gaussian_moments(10.0, 4.0, -1.0, 0.5)

    assert result.mean > 10.0
    assert result.var < 4.0


def test_non_convergence_raises() -> None:
    with pytest.raises(QuadratureError, match="did not converge"):
        logistic_gaussian_moments(0.0, 1.0, 0.0, 1.0, start_nodes=2, max_nodes=4, rtol=1e-300)


def test_non_positive_variance_is_rejected() -> None:
    with pytest.raises(ValueError, match="variance"):
        moments_with_nodes(0.0, 0.0, 0.0, 1.0, 16)
