"""Per-batch covariance structure: R_i, Σ_i = Z_i D Z_iᵀ + R_i and its Cholesky factor."""

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from batchmiss.models import BatchDesign, ModelParameters


class CovarianceError(ArithmeticError):
    """Raised when Σ_i is not positive definite."""


def residual_covariance(params: ModelParameters, design: BatchDesign) -> np.ndarray:
    """Diagonal R_i: σ₀² on the reference row, σ² on every other row."""
    diag = np.full(design.p, params.sigma_sq)
    if design.reference_channel is not None:
        diag[design.reference_channel] = params.sigma0_sq
    return np.diag(diag)


def marginal_covariance(params: ModelParameters, design: BatchDesign) -> np.ndarray:
    if design.h != params.h:
        raise ValueError(f"design has h={design.h} random effects but D is {params.h}×{params.h}")
    sigma = design.z @ params.d @ design.z.T + residual_covariance(params, design)
    return 0.5 * (sigma + sigma.T)


@dataclass(frozen=True, eq=False)
class BatchCovariance:
    """Σ_i, R_i and a lower Cholesky factor of Σ_i for one batch."""

    sigma: np.ndarray
    r: np.ndarray
    factor: tuple[np.ndarray, bool]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Return W_i · rhs = Σ_i⁻¹ · rhs."""
        return linalg.cho_solve(self.factor, rhs, check_finite=False)

    @property
    def precision(self) -> np.ndarray:
        w = self.solve(np.eye(self.sigma.shape[0]))
        return 0.5 * (w + w.T)

    @property
    def logdet(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self.factor[0]))))


def batch_covariance(params: ModelParameters, design: BatchDesign) -> BatchCovariance:
    sigma = marginal_covariance(params, design)
    try:
        factor = linalg.cho_factor(sigma, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise CovarianceError(
            f"Σ_i is not positive definite (σ₀²={params.sigma0_sq:.3g}, σ²={params.sigma_sq:.3g})"
        ) from exc
    return BatchCovariance(sigma=sigma, r=residual_covariance(params, design), factor=factor)
