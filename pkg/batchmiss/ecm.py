"""ECM fitting of the batch mixed model under a fixed missing-data mechanism.

One iteration computes per-batch conditional moments (observed batches from the
Gaussian posterior of b_i, missing batches from the tilted distribution of y_i
given M_i = 1) and then applies the closed-form conditional maximizations in the
order D, α, (σ₀², σ²).
"""

import logging
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from batchmiss.config import FitConfig
from batchmiss.covariance import batch_covariance, residual_covariance
from batchmiss.log import debug_event, warning_event
from batchmiss.mechanism import (
    ClampCounter,
    ExponentialTerms,
    exponential_terms,
    fit_intercept,
    log_marginal_missing_prob,
    log_observed_prob,
    profile_intercept,
    tilted_moments,
)
from batchmiss.models import (
    BatchDesign,
    EStepMoments,
    FeatureBatchData,
    MechanismForm,
    MissingMechanism,
    ModelParameters,
)
from batchmiss.validation import validate_dataset

logger = logging.getLogger("batchmiss.ecm")

VARIANCE_FLOOR = 1e-10
INIT_FLOOR = 1e-6
# Eigenvalues of the normal matrix below this fraction of the largest count as zero
RANK_RTOL = 1e-10
# Allowed decrease of the monitored log-likelihood between iterations
MONOTONE_SLACK = 1e-8
# Variance components above this multiple of the response variance have diverged
DIVERGENCE_RATIO = 1e8

_LOG_2PI = math.log(2.0 * math.pi)


class RankDeficiencyError(ArithmeticError):
    """Raised when the fixed-effect normal matrix is singular."""

    def __init__(self, columns: Sequence[int]) -> None:
        self.columns = tuple(columns)
        super().__init__(f"collinear fixed-effect columns {list(self.columns)}")


class InconsistentMechanismError(ValueError):
    """Raised when the mechanism gives an observed batch zero probability of being observed."""

    def __init__(self, batch: int, s: float) -> None:
        self.batch = batch
        self.s = s
        super().__init__(
            f"batch {batch} is observed (mean abundance {s:.6g}) "
            "but the mechanism makes it missing with probability 1"
        )


class FitError(RuntimeError):
    """A hard numeric failure inside the ECM loop, tagged with the iteration."""

    def __init__(self, message: str, iteration: int) -> None:
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {message}")


@dataclass(frozen=True, eq=False)
class FitResult:
    params: ModelParameters
    # Covariance of α̂ from the observed batches at the MLE
    alpha_cov: np.ndarray
    n_iter: int
    converged: bool
    # Observed-data log-likelihood at the starting values and after every iteration
    loglik_trace: tuple[float, ...]
    clamp_warnings: int
    mechanism: MissingMechanism
    seconds: float = 0.0

    @property
    def alpha_se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.alpha_cov), 0.0, None))

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1] if self.loglik_trace else math.nan


# -- E-step ---------------------------------------------------------------------------


def e_step_observed(
    params: ModelParameters,
    design: BatchDesign,
    y: np.ndarray,
    mask: np.ndarray | None = None,
) -> EStepMoments:
    """Posterior moments of b_i for an observed batch.

    With ``mask`` the unobserved rows are dropped from y, X and Z first.
    """
    y = np.asarray(y, dtype=float)
    if mask is not None:
        design = design.take_rows(mask)
        y = y[np.asarray(mask, dtype=bool)]
    if y.shape != (design.p,):
        raise ValueError(f"y has shape {y.shape}, expected ({design.p},)")

    cov = batch_covariance(params, design)
    gain = params.d @ cov.solve(design.z).T  # D Zᵀ W
    b_t = gain @ (y - design.x @ params.alpha)
    delta = params.d - gain @ design.z @ params.d
    delta = 0.5 * (delta + delta.T)
    v_t = design.z @ delta @ design.z.T
    return EStepMoments(b_t=b_t, delta_t=delta, v_t=0.5 * (v_t + v_t.T), y_t=y, design=design)


def e_step_missing(
    params: ModelParameters,
    design: BatchDesign,
    mech: MissingMechanism,
    covariates: np.ndarray | None = None,
    *,
    clamps: ClampCounter | None = None,
) -> EStepMoments:
    """Moments of b_i and e_i for a batch given that it is missing."""
    tilted = tilted_moments(params, design, mech, covariates, clamps=clamps)
    cov = batch_covariance(params, design)
    w_z = cov.solve(design.z)
    gain = params.d @ w_z.T
    b_t = gain @ (tilted.mean - design.x @ params.alpha)

    if mech.form is MechanismForm.EXPONENTIAL:
        # The tilt leaves Var(y | M=1) = Σ_i, so the posterior spread is the prior one
        delta = params.d
        v_t = cov.r
    else:
        r = cov.r
        w_r = cov.solve(r)
        delta = params.d - gain @ design.z @ params.d + gain @ tilted.cov @ gain.T
        v_t = r - r @ w_r + w_r.T @ tilted.cov @ w_r
    return EStepMoments(
        b_t=b_t,
        delta_t=0.5 * (delta + delta.T),
        v_t=0.5 * (v_t + v_t.T),
        y_t=tilted.mean,
        design=design,
        missing=True,
    )


def e_step(
    params: ModelParameters,
    designs: Sequence[BatchDesign],
    data: FeatureBatchData,
    mech: MissingMechanism,
    *,
    clamps: ClampCounter | None = None,
) -> list[EStepMoments]:
    moments: list[EStepMoments] = []
    for i, design in enumerate(designs):
        if data.batch_missing[i]:
            moments.append(
                e_step_missing(params, design, mech, mech.covariates_for(i), clamps=clamps)
            )
        else:
            moments.append(
                e_step_observed(params, design, data.batches[i], data.sporadic_mask[i])
            )
    return moments


# -- CM step ------------------------------------------------------------------------------


def _solve_normal(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    evals, evecs = np.linalg.eigh(0.5 * (lhs + lhs.T))
    null = evals <= RANK_RTOL * max(float(evals[-1]), 0.0)
    if null.any():
        involved = np.flatnonzero(np.any(np.abs(evecs[:, null]) > 1e-6, axis=1))
        raise RankDeficiencyError([int(c) for c in involved])
    return linalg.solve(lhs, rhs, assume_a="pos")


def cm_step(moments: Sequence[EStepMoments], params: ModelParameters) -> ModelParameters:
    """Closed-form conditional maximizations in the order D, α, (σ₀², σ²)."""
    if not moments:
        raise ValueError("cm_step needs at least one batch")

    d_new = np.mean([np.outer(m.b_t, m.b_t) + m.delta_t for m in moments], axis=0)
    d_new = 0.5 * (d_new + d_new.T)

    k = params.k
    lhs = np.zeros((k, k))
    rhs = np.zeros(k)
    for m in moments:
        r_inv = 1.0 / np.diag(residual_covariance(params, m.design))
        xr = m.design.x.T * r_inv
        lhs += xr @ m.design.x
        rhs += xr @ (m.y_t - m.design.z @ m.b_t)
    alpha = _solve_normal(lhs, rhs)

    ref_sum = tgt_sum = 0.0
    ref_n = tgt_n = 0
    for m in moments:
        resid = m.y_t - m.design.x @ alpha - m.design.z @ m.b_t
        second = resid**2 + np.diag(m.v_t)
        ref_mask = m.design.reference_mask()
        ref_sum += float(second[ref_mask].sum())
        ref_n += int(ref_mask.sum())
        tgt_sum += float(second[~ref_mask].sum())
        tgt_n += int((~ref_mask).sum())

    sigma0_sq = max(ref_sum / ref_n, VARIANCE_FLOOR) if ref_n else params.sigma0_sq
    sigma_sq = max(tgt_sum / tgt_n, VARIANCE_FLOOR) if tgt_n else params.sigma_sq
    return ModelParameters(alpha=alpha, sigma0_sq=sigma0_sq, sigma_sq=sigma_sq, d=d_new)


# -- Likelihood -----------------------------------------------------------------------


def observed_data_loglik(
    params: ModelParameters,
    designs: Sequence[BatchDesign],
    data: FeatureBatchData,
    mech: MissingMechanism,
    *,
    include_mechanism: bool = True,
    clamps: ClampCounter | None = None,
) -> float:
    """Log-likelihood of the observed responses and batch-missing flags.

    Sporadically missing samples are integrated out by dropping their rows. With
    ``include_mechanism=False`` only the Gaussian terms of the observed batches
    are summed.
    """
    total = 0.0
    for i, design in enumerate(designs):
        covariates = mech.covariates_for(i)
        if data.batch_missing[i]:
            if include_mechanism:
                total += log_marginal_missing_prob(
                    params, design, mech, covariates, clamps=clamps
                )
            continue

        sub = design.take_rows(data.sporadic_mask[i])
        y = data.observed_values(i)
        cov = batch_covariance(params, sub)
        resid = y - sub.x @ params.alpha
        total -= 0.5 * (sub.p * _LOG_2PI + cov.logdet + float(resid @ cov.solve(resid)))
        if include_mechanism:
            s = float(y.mean())
            log_obs = log_observed_prob(mech, s, covariates, clamps=clamps)
            if log_obs == -math.inf:
                raise InconsistentMechanismError(i, s)
            total += log_obs
    return total


# -- Starting values ------------------------------------------------------------------


def initial_parameters(
    data: FeatureBatchData,
    designs: Sequence[BatchDesign],
    policy: str = "available-case",
) -> ModelParameters:
    """Ω⁽⁰⁾ from the observed rows ("available-case") or a neutral start ("unit")."""
    k, h = designs[0].k, designs[0].h
    if policy == "unit":
        return ModelParameters(alpha=np.zeros(k), sigma0_sq=1.0, sigma_sq=1.0, d=np.eye(h))
    if policy != "available-case":
        raise ValueError(f"unknown initialization policy {policy!r}")

    subs = [designs[i].take_rows(data.sporadic_mask[i]) for i in data.observed_indices]
    ys = [data.observed_values(i) for i in data.observed_indices]
    x_all = np.vstack([s.x for s in subs])
    y_all = np.concatenate(ys)
    alpha, *_ = np.linalg.lstsq(x_all, y_all, rcond=None)

    resids = [y - s.x @ alpha for s, y in zip(subs, ys, strict=True)]
    refs = np.concatenate([s.reference_mask() for s in subs])
    r_all = np.concatenate(resids)
    sigma_sq = float(np.mean(r_all[~refs] ** 2)) if (~refs).any() else float(np.mean(r_all**2))
    sigma0_sq = float(np.mean(r_all[refs] ** 2)) if refs.any() else sigma_sq
    sigma_sq = max(sigma_sq, INIT_FLOOR)
    sigma0_sq = max(sigma0_sq, INIT_FLOOR)

    between = INIT_FLOOR
    if len(resids) >= 2:
        batch_means = np.array([r.mean() for r in resids])
        noise = float(np.mean([sigma_sq / r.shape[0] for r in resids]))
        between = max(float(np.var(batch_means)) - noise, INIT_FLOOR)
    return ModelParameters(
        alpha=alpha, sigma0_sq=sigma0_sq, sigma_sq=sigma_sq, d=between * np.eye(h)
    )


# -- Driver ---------------------------------------------------------------------------------


class DivergenceError(ArithmeticError):
    """Raised when the variance components run off to infinity."""


def _response_scale(data: FeatureBatchData) -> float:
    values = np.concatenate([data.observed_values(i) for i in data.observed_indices])
    return max(float(np.var(values)), 1.0)


def _check_divergence(params: ModelParameters, limit: float) -> None:
    theta = params.as_vector()
    if not np.all(np.isfinite(theta)):
        raise DivergenceError("parameters became non-finite")
    largest = max(params.sigma0_sq, params.sigma_sq, float(np.max(np.abs(params.d))))
    if largest > limit:
        raise DivergenceError(f"variance components diverged (largest {largest:.3g})")


def _relative_change(old: ModelParameters, new: ModelParameters) -> float:
    a, b = old.as_vector(), new.as_vector()
    return float(np.max(np.abs(b - a)) / max(float(np.max(np.abs(a))), 1.0))


def alpha_covariance(
    params: ModelParameters, designs: Sequence[BatchDesign], data: FeatureBatchData
) -> np.ndarray:
    """(Σ_{i∈O} XᵢᵀWᵢXᵢ)⁻¹ over the observed batches and their retained rows."""
    info = np.zeros((params.k, params.k))
    for i in data.observed_indices:
        sub = designs[i].take_rows(data.sporadic_mask[i])
        cov = batch_covariance(params, sub)
        info += sub.x.T @ cov.solve(sub.x)
    cov_alpha = _solve_normal(info, np.eye(params.k))
    return 0.5 * (cov_alpha + cov_alpha.T)


def fit(
    data: FeatureBatchData,
    designs: Sequence[BatchDesign],
    mech: MissingMechanism,
    config: FitConfig | None = None,
    *,
    initial: ModelParameters | None = None,
) -> FitResult:
    """Maximum-likelihood fit of Ω with Γ held fixed.

    Non-convergence within ``max_iter`` is reported through ``converged``; numeric
    failures raise FitError carrying the iteration at which they occurred.
    """
    config = config or FitConfig()
    validate_dataset(data, designs).raise_if_fatal(data.feature_id)
    started = time.perf_counter()

    params = initial if initial is not None else initial_parameters(data, designs, config.init)
    limit = DIVERGENCE_RATIO * _response_scale(data)
    clamps = ClampCounter()
    include_mechanism = not mech.is_ignorable
    trace: list[float] = []

    def monitor(current: ModelParameters) -> None:
        ll = observed_data_loglik(
            current, designs, data, mech, include_mechanism=include_mechanism, clamps=clamps
        )
        if trace and ll < trace[-1] - MONOTONE_SLACK:
            warning_event(
                logger,
                "loglik_decreased",
                "Observed-data log-likelihood decreased between iterations",
                feature_id=data.feature_id,
                iteration=len(trace),
                previous=trace[-1],
                current=ll,
            )
        trace.append(ll)

    converged = False
    n_iter = 0
    try:
        if config.monitor_likelihood:
            monitor(params)
        for n_iter in range(1, config.max_iter + 1):
            updated = cm_step(e_step(params, designs, data, mech, clamps=clamps), params)
            _check_divergence(updated, limit)
            change = _relative_change(params, updated)
            params = updated
            if config.monitor_likelihood:
                monitor(params)
            if change < config.tol:
                converged = True
                break
    except ArithmeticError as exc:
        raise FitError(str(exc), iteration=n_iter) from exc

    try:
        cov_alpha = alpha_covariance(params, designs, data)
    except ArithmeticError as exc:
        raise FitError(f"alpha covariance: {exc}", iteration=n_iter) from exc

    if clamps.count:
        warning_event(
            logger,
            "mechanism_clamped",
            "Exponential missing probability clamped at 1 during the fit",
            feature_id=data.feature_id,
            clamps=clamps.count,
            mechanism=mech.describe(),
        )

    seconds = time.perf_counter() - started
    debug_event(
        logger,
        "fit_finished",
        "ECM fit finished",
        feature_id=data.feature_id,
        iterations=n_iter,
        converged=converged,
        clamps=clamps.count,
        seconds=round(seconds, 6),
    )
    return FitResult(
        params=params,
        alpha_cov=cov_alpha,
        n_iter=n_iter,
        converged=converged,
        loglik_trace=tuple(trace),
        clamp_warnings=clamps.count,
        mechanism=mech,
        seconds=seconds,
    )


# -- Profile likelihood over Γ --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ProfilePoint:
    mechanism: MissingMechanism
    # Observed-data log-likelihood including the mechanism terms
    loglik: float
    converged: bool = False
    error: str | None = None
    # Exponential form only: the Gaussian part and the terms γ₀ was profiled over
    gaussian_loglik: float = math.nan
    terms: ExponentialTerms | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass(frozen=True)
class ProfileResult:
    points: tuple[ProfilePoint, ...]
    best_index: int | None = field(default=None)

    @property
    def best(self) -> ProfilePoint | None:
        return None if self.best_index is None else self.points[self.best_index]


def _profile_exponential(
    data: FeatureBatchData,
    designs: Sequence[BatchDesign],
    gamma: float,
    config: FitConfig | None,
) -> ProfilePoint:
    fit_mech = MissingMechanism.exponential(fit_intercept(data, gamma), gamma)
    result = fit(data, designs, fit_mech, config)
    gaussian = observed_data_loglik(result.params, designs, data, fit_mech, include_mechanism=False)
    terms = exponential_terms(result.params, designs, data, gamma)
    gamma0, mechanism_ll = profile_intercept([terms])
    return ProfilePoint(
        mechanism=MissingMechanism.exponential(gamma0, gamma),
        loglik=gaussian + mechanism_ll,
        converged=result.converged,
        gaussian_loglik=gaussian,
        terms=terms,
    )


def profile_point(
    data: FeatureBatchData,
    designs: Sequence[BatchDesign],
    mech: MissingMechanism,
    config: FitConfig | None = None,
) -> ProfilePoint:
    """Fit at one Γ and evaluate the full observed-data log-likelihood there.

    Under the exponential form γ₀ is profiled out: the returned mechanism keeps
    the slope of ``mech`` and carries the γ₀ ≥ 0 maximizing the likelihood.
    """
    try:
        if mech.form is MechanismForm.EXPONENTIAL:
            return _profile_exponential(data, designs, mech.gamma, config)
        result = fit(data, designs, mech, config)
        ll = observed_data_loglik(result.params, designs, data, mech)
    except (FitError, ArithmeticError) as exc:
        warning_event(
            logger,
            "profile_point_failed",
            "Profile fit failed at one grid point",
            feature_id=data.feature_id,
            mechanism=mech.describe(),
            err=str(exc),
        )
        return ProfilePoint(mechanism=mech, loglik=math.nan, error=str(exc))
    return ProfilePoint(mechanism=mech, loglik=ll, converged=result.converged)


def pooled_profile_point(points: Sequence[ProfilePoint]) -> ProfilePoint:
    """Profile point of features sharing one Γ; exponential γ₀ is maximized jointly."""
    if not points:
        raise ValueError("no profile points to pool")
    mech = points[0].mechanism
    n_failed = sum(1 for p in points if p.failed)
    if n_failed:
        return ProfilePoint(mechanism=mech, loglik=math.nan, error=f"{n_failed} features failed")
    converged = all(p.converged for p in points)
    terms = [p.terms for p in points if p.terms is not None]
    if len(terms) != len(points):
        return ProfilePoint(
            mechanism=mech, loglik=math.fsum(p.loglik for p in points), converged=converged
        )
    gamma0, mechanism_ll = profile_intercept(terms)
    gaussian = math.fsum(p.gaussian_loglik for p in points)
    return ProfilePoint(
        mechanism=MissingMechanism.exponential(gamma0, mech.gamma),
        loglik=gaussian + mechanism_ll,
        converged=converged,
        gaussian_loglik=gaussian,
    )


def best_profile_index(points: Sequence[ProfilePoint]) -> int | None:
    best: int | None = None
    for i, point in enumerate(points):
        if point.failed or not math.isfinite(point.loglik):
            continue
        if best is None or point.loglik > points[best].loglik:
            best = i
    return best


def profile_gamma(
    data: FeatureBatchData,
    designs: Sequence[BatchDesign],
    grid: Sequence[MissingMechanism],
    config: FitConfig | None = None,
) -> ProfileResult:
    """Maximized observed-data log-likelihood at each Γ of the grid."""
    if not grid:
        raise ValueError("profile grid must not be empty")
    points = tuple(profile_point(data, designs, mech, config) for mech in grid)
    return ProfileResult(points=points, best_index=best_profile_index(points))
