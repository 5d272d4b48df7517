"""Wald and permutation tests on fixed effects, and the relative-abundance baseline."""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from batchmiss.config import FitConfig
from batchmiss.ecm import FitError, FitResult, InconsistentMechanismError, fit
from batchmiss.log import debug_event, warning_event
from batchmiss.models import BatchDesign, FeatureBatchData, MissingMechanism

logger = logging.getLogger("batchmiss.inference")

# Share of failed permutation refits above which a test is flagged unreliable
MAX_FAILED_FRACTION = 0.05


class WaldError(ArithmeticError):
    """Raised when a tested coefficient has no positive variance."""


class BaselineError(ValueError):
    """Raised when the relative-abundance regression cannot be formed."""


@dataclass(frozen=True)
class CoefficientTest:
    index: int
    name: str
    estimate: float
    std_error: float
    wald_z: float
    # NaN when no permutations were run
    p_perm: float


@dataclass(frozen=True, eq=False)
class TestResult:
    __test__ = False

    coefficients: tuple[CoefficientTest, ...]
    permutations: int
    seed: int
    n_failed: int = 0
    unreliable: bool = False
    fit: FitResult | None = None

    def by_name(self, name: str) -> CoefficientTest:
        for coefficient in self.coefficients:
            if coefficient.name == name:
                return coefficient
        raise KeyError(name)


def wald_statistics(result: FitResult, tested: Sequence[int]) -> np.ndarray:
    """z_i = α̂_i / sqrt(cov(α̂)_ii) for each tested index."""
    idx = np.asarray(tested, dtype=int)
    var = np.diag(result.alpha_cov)[idx]
    if np.any(~(var > 0)):
        bad = [int(i) for i, v in zip(idx, var, strict=True) if not v > 0]
        raise WaldError(f"coefficients {bad} have non-positive variance")
    return result.params.alpha[idx] / np.sqrt(var)


def size_groups(designs: Sequence[BatchDesign]) -> list[np.ndarray]:
    """Indices of batches sharing a batch size; permutations stay within a group."""
    groups: dict[int, list[int]] = {}
    for i, design in enumerate(designs):
        groups.setdefault(design.p, []).append(i)
    return [np.array(v) for _, v in sorted(groups.items())]


def draw_permutation(groups: Sequence[np.ndarray], q: int, rng: np.random.Generator) -> np.ndarray:
    order = np.arange(q)
    for group in groups:
        order[group] = rng.permutation(group)
    return order


def _permutation_counts(
    data: FeatureBatchData,
    designs: Sequence[BatchDesign],
    statistic: Callable[[FeatureBatchData], np.ndarray],
    observed: np.ndarray,
    permutations: int,
    seed: int,
    failures: tuple[type[BaseException], ...],
) -> tuple[np.ndarray, int]:
    rng = np.random.default_rng(seed)
    groups = size_groups(designs)
    exceed = np.zeros(observed.shape[0], dtype=int)
    n_failed = 0
    for _ in range(permutations):
        order = draw_permutation(groups, data.q, rng)
        try:
            permuted = np.abs(statistic(data.permuted(order)))
        except failures as exc:
            n_failed += 1
            debug_event(
                logger,
                "permutation_failed",
                "Permutation refit failed",
                feature_id=data.feature_id,
                err=str(exc),
            )
            continue
        exceed += permuted >= observed
    return exceed, n_failed


def _p_values(exceed: np.ndarray, permutations: int, n_failed: int) -> np.ndarray:
    if permutations == 0:
        return np.full(exceed.shape[0], math.nan)
    return (1.0 + exceed) / (permutations - n_failed + 1.0)


def _flag_unreliable(feature_id: str, permutations: int, n_failed: int) -> bool:
    unreliable = n_failed > MAX_FAILED_FRACTION * permutations
    if unreliable:
        warning_event(
            logger,
            "permutation_unreliable",
            "Too many permutation refits failed",
            feature_id=feature_id,
            failed=n_failed,
            permutations=permutations,
        )
    return unreliable


def _names(tested: Sequence[int], names: Sequence[str] | None) -> list[str]:
    if names is None:
        return [f"x{i}" for i in tested]
    return [names[i] for i in tested]


def permutation_test(
    data: FeatureBatchData,
    designs: Sequence[BatchDesign],
    mech: MissingMechanism,
    config: FitConfig | None,
    tested: Sequence[int],
    permutations: int,
    seed: int,
    names: Sequence[str] | None = None,
) -> TestResult:
    """Wald tests calibrated by permuting whole response batches against the designs.

    Batches are only exchanged with batches of the same size. Γ stays fixed
    across permutations; every permutation is a full refit.
    """
    if permutations < 0:
        raise ValueError("permutations must be >= 0")
    if data.q < 2:
        raise ValueError("a permutation test needs at least 2 batches")
    tested = [int(i) for i in tested]

    observed_fit = fit(data, designs, mech, config)
    z_obs = wald_statistics(observed_fit, tested)

    def statistic(permuted: FeatureBatchData) -> np.ndarray:
        return wald_statistics(fit(permuted, designs, mech, config), tested)

    exceed, n_failed = _permutation_counts(
        data,
        designs,
        statistic,
        np.abs(z_obs),
        permutations,
        seed,
        (FitError, ArithmeticError, InconsistentMechanismError),
    )
    p_perm = _p_values(exceed, permutations, n_failed)
    se = observed_fit.alpha_se
    coefficients = tuple(
        CoefficientTest(
            index=i,
            name=name,
            estimate=float(observed_fit.params.alpha[i]),
            std_error=float(se[i]),
            wald_z=float(z),
            p_perm=float(p),
        )
        for i, name, z, p in zip(tested, _names(tested, names), z_obs, p_perm, strict=True)
    )
    return TestResult(
        coefficients=coefficients,
        permutations=permutations,
        seed=seed,
        n_failed=n_failed,
        unreliable=_flag_unreliable(data.feature_id, permutations, n_failed),
        fit=observed_fit,
    )


# -- Relative-abundance baseline --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _RelativeRegression:
    estimate: np.ndarray
    std_error: np.ndarray

    @property
    def z(self) -> np.ndarray:
        # Exact fit with a zero estimate gives z = 0
        with np.errstate(divide="ignore", invalid="ignore"):
            z = self.estimate / self.std_error
        return np.where((self.std_error == 0.0) & (self.estimate == 0.0), 0.0, z)


def _relative_rows(
    data: FeatureBatchData, designs: Sequence[BatchDesign]
) -> tuple[np.ndarray, np.ndarray]:
    responses: list[np.ndarray] = []
    rows: list[np.ndarray] = []
    for i in data.observed_indices:
        ref = designs[i].reference_channel
        mask = data.sporadic_mask[i]
        if ref is None or not mask[ref]:
            continue
        target = mask.copy()
        target[ref] = False
        if not target.any():
            continue
        values = data.batches[i]
        responses.append(values[target] - values[ref])
        rows.append(designs[i].x[target])
    if not responses:
        raise BaselineError(
            f"feature {data.feature_id!r}: no batch has an observed reference channel"
        )
    return np.concatenate(responses), np.vstack(rows)


def _relative_regression(
    data: FeatureBatchData, designs: Sequence[BatchDesign], columns: Sequence[int]
) -> _RelativeRegression:
    response, x = _relative_rows(data, designs)
    design = np.column_stack([np.ones(response.shape[0]), x[:, list(columns)]])
    n, m = design.shape
    if n <= m or np.linalg.matrix_rank(design) < m:
        raise BaselineError(f"relative-abundance design is rank deficient ({n} rows, {m} columns)")
    coef, *_ = np.linalg.lstsq(design, response, rcond=None)
    resid = response - design @ coef
    scale = float(resid @ resid) / (n - m)
    cov = scale * np.linalg.inv(design.T @ design)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))[1:]
    return _RelativeRegression(estimate=coef[1:], std_error=se)


def relative_abundance_baseline(
    data: FeatureBatchData,
    designs: Sequence[BatchDesign],
    tested: Sequence[int],
    permutations: int,
    seed: int,
    names: Sequence[str] | None = None,
) -> TestResult:
    """OLS of target-minus-reference log abundance on the tested covariates.

    Tested columns that are constant on the target rows cannot be estimated and
    are reported as NaN.
    """
    tested = [int(i) for i in tested]
    _, x = _relative_rows(data, designs)
    usable = [i for i in tested if np.ptp(x[:, i]) > 0.0]

    estimate = np.full(len(tested), math.nan)
    std_error = np.full(len(tested), math.nan)
    z = np.full(len(tested), math.nan)
    p_perm = np.full(len(tested), math.nan)
    n_failed = 0
    if usable:
        observed = _relative_regression(data, designs, usable)
        positions = [tested.index(i) for i in usable]
        estimate[positions] = observed.estimate
        std_error[positions] = observed.std_error
        z[positions] = observed.z

        def statistic(permuted: FeatureBatchData) -> np.ndarray:
            return _relative_regression(permuted, designs, usable).z

        exceed, n_failed = _permutation_counts(
            data,
            designs,
            statistic,
            np.abs(observed.z),
            permutations,
            seed,
            (BaselineError, np.linalg.LinAlgError),
        )
        p_perm[positions] = _p_values(exceed, permutations, n_failed)

    coefficients = tuple(
        CoefficientTest(
            index=i,
            name=name,
            estimate=float(estimate[j]),
            std_error=float(std_error[j]),
            wald_z=float(z[j]),
            p_perm=float(p_perm[j]),
        )
        for j, (i, name) in enumerate(zip(tested, _names(tested, names), strict=True))
    )
    return TestResult(
        coefficients=coefficients,
        permutations=permutations,
        seed=seed,
        n_failed=n_failed,
        unreliable=_flag_unreliable(data.feature_id, permutations, n_failed),
    )
