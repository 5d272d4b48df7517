"""Batch-level abundance-dependent missingness.

Missing probabilities under the exponential and logit forms, available-case
estimation of Γ across features, and the conditional moments of a batch given
that it is missing (the tilted Gaussian consumed by the E-step).

Both forms depend on the responses only through the batch mean s = 1ᵀy/p, and
s is Gaussian under the model, so every quantity here reduces to the scalar
pair (m_s, v_s) plus a rank-one map back to the p-dimensional response.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from batchmiss.covariance import marginal_covariance
from batchmiss.log import warning_event
from batchmiss.models import (
    BatchDesign,
    FeatureBatchData,
    MechanismForm,
    MissingMechanism,
    ModelParameters,
)
from batchmiss.quadrature import logistic_gaussian_moments

logger = logging.getLogger("batchmiss.mechanism")


class MechanismEstimationError(ValueError):
    """Raised when Γ cannot be estimated from the available cases."""


class ClampCounter:
    """Counts exponential probabilities clamped at 1."""

    def __init__(self) -> None:
        self.count = 0

    def record(self) -> None:
        self.count += 1


@dataclass(frozen=True)
class MechanismFitInput:
    feature_id: str
    # Available-case mean abundance t_j
    t: float
    # Fraction of batches in which the feature is missing, 1 - Q_obs/Q
    pi: float
    q_obs: int
    q: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.pi <= 1.0:
            raise ValueError(f"feature {self.feature_id!r}: pi must lie in [0, 1], got {self.pi}")
        if self.q_obs > 0 and not math.isfinite(self.t):
            raise ValueError(f"feature {self.feature_id!r}: t must be finite")

    @property
    def usable(self) -> bool:
        """False for fully observed (log 0) and fully missing (no data) features."""
        return 0.0 < self.pi < 1.0

    @classmethod
    def from_feature(cls, data: FeatureBatchData) -> "MechanismFitInput":
        return cls(
            feature_id=data.feature_id,
            t=data.available_mean,
            pi=data.missing_fraction,
            q_obs=data.q_obs,
            q=data.q,
        )


def _linear_offset(mech: MissingMechanism, covariates: np.ndarray | None) -> float:
    if covariates is None:
        return mech.gamma0
    if mech.gamma2 is None:
        raise ValueError("batch covariates given to a mechanism without gamma2")
    return mech.gamma0 + float(mech.gamma2 @ np.asarray(covariates, dtype=float))


def miss_prob(
    mech: MissingMechanism,
    s: float,
    covariates: np.ndarray | None = None,
    *,
    clamps: ClampCounter | None = None,
) -> float:
    """Pr(M = 1 | batch mean abundance s)."""
    if mech.form is MechanismForm.EXPONENTIAL:
        if covariates is not None:
            raise ValueError("the exponential mechanism takes no batch covariates")
        exponent = -mech.gamma0 - mech.gamma * s
        if exponent > 0.0:
            if clamps is not None:
                clamps.record()
            return 1.0
        return math.exp(exponent)
    return float(special.expit(_linear_offset(mech, covariates) + mech.gamma * s))


def log_observed_prob(
    mech: MissingMechanism,
    s: float,
    covariates: np.ndarray | None = None,
    *,
    clamps: ClampCounter | None = None,
) -> float:
    """log(1 - Pr(M = 1 | s)); -inf when the mechanism says the batch is surely missing."""
    if mech.form is MechanismForm.EXPONENTIAL:
        exponent = -mech.gamma0 - mech.gamma * s
        if exponent >= 0.0:
            if exponent > 0.0 and clamps is not None:
                clamps.record()
            return -math.inf
        return math.log(-math.expm1(exponent))
    return float(special.log_expit(-(_linear_offset(mech, covariates) + mech.gamma * s)))


# -- Γ estimation --------------------------------------------------------------


@dataclass(frozen=True)
class GammaEstimate:
    gamma0: float
    gamma: float
    form: MechanismForm
    n_used: int
    n_excluded: int

    def fitted_pi(self, t: float | np.ndarray) -> np.ndarray:
        eta = self.gamma0 + self.gamma * np.asarray(t, dtype=float)
        if self.form is MechanismForm.EXPONENTIAL:
            return np.exp(-eta)
        return special.expit(eta)

    def to_mechanism(self) -> MissingMechanism:
        """Turn the estimate into a usable mechanism.

        The exponential form cannot carry negative coefficients; they are floored
        at 0. γ₀ only scales the missing probability and does not move Ω̂.
        """
        if self.form is MechanismForm.LOGIT:
            return MissingMechanism.logit(self.gamma0, self.gamma)
        gamma0, gamma = self.gamma0, self.gamma
        if gamma0 < 0.0 or gamma < 0.0:
            warning_event(
                logger,
                "gamma_floored",
                "Negative exponential mechanism estimate floored at 0",
                gamma0=gamma0,
                gamma=gamma,
            )
        return MissingMechanism.exponential(max(gamma0, 0.0), max(gamma, 0.0))


def _fit_line(
    inputs: Sequence[MechanismFitInput], form: MechanismForm
) -> GammaEstimate:
    usable = [item for item in inputs if item.usable]
    n_excluded = len(inputs) - len(usable)
    if len(usable) < 2:
        raise MechanismEstimationError(
            f"need at least 2 features with 0 < pi < 1, got {len(usable)} "
            f"({n_excluded} excluded)"
        )
    t = np.array([item.t for item in usable])
    pi = np.array([item.pi for item in usable])
    if np.ptp(t) == 0.0:
        raise MechanismEstimationError("all usable features share the same mean abundance")

    design = np.column_stack([np.ones_like(t), t])
    if form is MechanismForm.EXPONENTIAL:
        response = -np.log(pi)
    else:
        response = special.logit(pi)
    coef, *_ = np.linalg.lstsq(design, response, rcond=None)
    return GammaEstimate(
        gamma0=float(coef[0]),
        gamma=float(coef[1]),
        form=form,
        n_used=len(usable),
        n_excluded=n_excluded,
    )


def estimate_gamma(inputs: Sequence[MechanismFitInput]) -> GammaEstimate:
    """Least-squares fit of -log π_j on (1, t_j) over features with 0 < π_j < 1."""
    return _fit_line(inputs, MechanismForm.EXPONENTIAL)


def estimate_logit_gamma(inputs: Sequence[MechanismFitInput]) -> GammaEstimate:
    """Least-squares fit of logit π_j on (1, t_j); the logistic analogue of estimate_gamma."""
    return _fit_line(inputs, MechanismForm.LOGIT)


# -- Conditional moments of a missing batch ----------------------------------------


@dataclass(frozen=True, eq=False)
class TiltedMoments:
    """E(y | M = 1), Var(y | M = 1) and log Pr(M = 1) for one batch."""

    mean: np.ndarray
    cov: np.ndarray
    log_marginal: float


@dataclass(frozen=True, eq=False)
class _BatchMean:
    mu: np.ndarray
    sigma: np.ndarray
    # Cov(y, s) = Σ1/p
    cov_ys: np.ndarray
    m_s: float
    v_s: float


def _batch_mean(params: ModelParameters, design: BatchDesign) -> _BatchMean:
    mu = design.x @ params.alpha
    sigma = marginal_covariance(params, design)
    cov_ys = sigma.sum(axis=1) / design.p
    return _BatchMean(
        mu=mu,
        sigma=sigma,
        cov_ys=cov_ys,
        m_s=float(mu.mean()),
        v_s=float(cov_ys.sum() / design.p),
    )


def _exponential_log_marginal(
    mech: MissingMechanism, m_s: float, v_s: float, clamps: ClampCounter | None
) -> float:
    value = -mech.gamma0 - mech.gamma * m_s + 0.5 * mech.gamma**2 * v_s
    if value > 0.0:
        if clamps is not None:
            clamps.record()
        return 0.0
    return value


def tilted_moments_exponential(
    params: ModelParameters,
    design: BatchDesign,
    mech: MissingMechanism,
    *,
    clamps: ClampCounter | None = None,
) -> TiltedMoments:
    if mech.form is not MechanismForm.EXPONENTIAL:
        raise ValueError(f"expected an exponential mechanism, got {mech.form}")
    bm = _batch_mean(params, design)
    return TiltedMoments(
        mean=bm.mu - mech.gamma * bm.cov_ys,
        cov=bm.sigma,
        log_marginal=_exponential_log_marginal(mech, bm.m_s, bm.v_s, clamps),
    )


def tilted_moments_logit(
    params: ModelParameters,
    design: BatchDesign,
    mech: MissingMechanism,
    covariates: np.ndarray | None = None,
) -> TiltedMoments:
    if mech.form is not MechanismForm.LOGIT:
        raise ValueError(f"expected a logit mechanism, got {mech.form}")
    bm = _batch_mean(params, design)
    offset = _linear_offset(mech, covariates)
    if mech.gamma == 0.0:
        return TiltedMoments(
            mean=bm.mu,
            cov=bm.sigma,
            log_marginal=float(special.log_expit(offset)),
        )

    scalar = logistic_gaussian_moments(bm.m_s, bm.v_s, offset, mech.gamma)
    c = bm.cov_ys / bm.v_s
    cov = bm.sigma + np.outer(c, c) * (scalar.var - bm.v_s)
    return TiltedMoments(
        mean=bm.mu + c * (scalar.mean - bm.m_s),
        cov=0.5 * (cov + cov.T),
        log_marginal=scalar.log_mass,
    )


def tilted_moments(
    params: ModelParameters,
    design: BatchDesign,
    mech: MissingMechanism,
    covariates: np.ndarray | None = None,
    *,
    clamps: ClampCounter | None = None,
) -> TiltedMoments:
    if mech.form is MechanismForm.EXPONENTIAL:
        return tilted_moments_exponential(params, design, mech, clamps=clamps)
    return tilted_moments_logit(params, design, mech, covariates)


def log_marginal_missing_prob(
    params: ModelParameters,
    design: BatchDesign,
    mech: MissingMechanism,
    covariates: np.ndarray | None = None,
    *,
    clamps: ClampCounter | None = None,
) -> float:
    """log Pr(M = 1) with the responses integrated out."""
    if mech.form is MechanismForm.EXPONENTIAL:
        bm = _batch_mean(params, design)
        return _exponential_log_marginal(mech, bm.m_s, bm.v_s, clamps)
    return tilted_moments_logit(params, design, mech, covariates).log_marginal


def marginal_missing_prob(
    params: ModelParameters,
    design: BatchDesign,
    mech: MissingMechanism,
    covariates: np.ndarray | None = None,
    *,
    clamps: ClampCounter | None = None,
) -> float:
    return math.exp(log_marginal_missing_prob(params, design, mech, covariates, clamps=clamps))


# -- Intercept of the exponential mechanism ------------------------------------------

# Width of the γ₀ search window above the smallest admissible intercept
_INTERCEPT_SPAN = 50.0
_INTERCEPT_XATOL = 1e-10


@dataclass(frozen=True, eq=False)
class ExponentialTerms:
    """Mechanism terms of one fitted feature at a fixed exponential slope γ.

    Under the exponential form the tilted mean μ - γΣ1/p does not involve γ₀, so
    Ω̂ is the same for every intercept and γ₀ can be maximized afterwards.
    """

    gamma: float
    # Mean abundance s of every observed batch
    observed_s: np.ndarray
    # -γ·m_s + γ²·v_s/2 of every missing batch
    missing_offset: np.ndarray

    @property
    def min_intercept(self) -> float:
        """Every observed batch has positive probability only for γ₀ above this."""
        if self.observed_s.size == 0:
            return -math.inf
        return float(np.max(-self.gamma * self.observed_s))

    def loglik(self, gamma0: float) -> float:
        u = gamma0 + self.gamma * self.observed_s
        if np.any(u <= 0.0):
            return -math.inf
        observed = math.fsum(np.log(-np.expm1(-u)))
        missing = math.fsum(np.minimum(self.missing_offset - gamma0, 0.0))
        return observed + missing


def exponential_terms(
    params: ModelParameters,
    designs: Sequence[BatchDesign],
    data: FeatureBatchData,
    gamma: float,
) -> ExponentialTerms:
    observed = [float(data.observed_values(i).mean()) for i in data.observed_indices]
    offsets: list[float] = []
    for i, design in enumerate(designs):
        if data.batch_missing[i]:
            bm = _batch_mean(params, design)
            offsets.append(-gamma * bm.m_s + 0.5 * gamma**2 * bm.v_s)
    return ExponentialTerms(
        gamma=gamma,
        observed_s=np.asarray(observed, dtype=float),
        missing_offset=np.asarray(offsets, dtype=float),
    )


def fit_intercept(data: FeatureBatchData, gamma: float) -> float:
    """An intercept at which every observed batch of the feature is possible."""
    means = [float(data.observed_values(i).mean()) for i in data.observed_indices]
    lower = max((-gamma * s for s in means), default=0.0)
    return max(lower, 0.0) + 1.0


def profile_intercept(terms: Sequence[ExponentialTerms]) -> tuple[float, float]:
    """γ₀ ≥ 0 maximizing the summed mechanism terms, and that maximum.

    The sum is concave in γ₀. Without missing batches it rises toward 0 as γ₀
    grows and the top of the search window is returned.
    """
    if not terms:
        raise ValueError("no mechanism terms to maximize")

    def total(gamma0: float) -> float:
        return math.fsum(t.loglik(gamma0) for t in terms)

    lower = max(max(t.min_intercept for t in terms), 0.0)
    # Step off the boundary, where an observed batch would be surely missing
    lower += 1e-9 * max(lower, 1.0)
    offsets = [float(t.missing_offset.max()) for t in terms if t.missing_offset.size]
    upper = max([lower, *offsets]) + _INTERCEPT_SPAN

    result = optimize.minimize_scalar(
        lambda g0: -total(g0),
        bounds=(lower, upper),
        method="bounded",
        options={"xatol": _INTERCEPT_XATOL},
    )
    gamma0 = float(result.x)
    best = total(gamma0)
    for edge in (lower, upper):
        value = total(edge)
        if value > best:
            gamma0, best = edge, value
    return gamma0, best


# -- Diagnostic ----------------------------------------------------------------------


@dataclass(frozen=True)
class DiagnosticRow:
    feature_id: str
    t: float
    pi: float
    fitted_pi: float


@dataclass(frozen=True)
class DiagnosticBin:
    pi: float
    median_t: float
    n_features: int


@dataclass(frozen=True)
class BadmmDiagnostic:
    rows: tuple[DiagnosticRow, ...]
    bins: tuple[DiagnosticBin, ...]
    estimate: GammaEstimate | None
    # Line through the binned medians: log π = intercept + slope · median t
    line_intercept: float | None = None
    line_slope: float | None = None

    @property
    def fit_available(self) -> bool:
        return self.estimate is not None


def badmm_diagnostic(
    inputs: Sequence[MechanismFitInput], estimate: GammaEstimate | None
) -> BadmmDiagnostic:
    """Plot-ready table of missing fraction against observed mean abundance."""
    rows = tuple(
        DiagnosticRow(
            feature_id=item.feature_id,
            t=item.t,
            pi=item.pi,
            fitted_pi=(
                float(estimate.fitted_pi(item.t))
                if estimate is not None and item.q_obs
                else math.nan
            ),
        )
        for item in inputs
    )

    groups: dict[float, list[float]] = {}
    for item in inputs:
        if item.usable:
            groups.setdefault(round(item.pi, 12), []).append(item.t)
    bins = tuple(
        DiagnosticBin(pi=pi, median_t=float(np.median(ts)), n_features=len(ts))
        for pi, ts in sorted(groups.items())
    )

    intercept = slope = None
    if len(bins) >= 2:
        median_t = np.array([b.median_t for b in bins])
        if np.ptp(median_t) > 0.0:
            design = np.column_stack([np.ones_like(median_t), median_t])
            coef, *_ = np.linalg.lstsq(design, np.log([b.pi for b in bins]), rcond=None)
            intercept, slope = float(coef[0]), float(coef[1])

    return BadmmDiagnostic(
        rows=rows,
        bins=bins,
        estimate=estimate,
        line_intercept=intercept,
        line_slope=slope,
    )
