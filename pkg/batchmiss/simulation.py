"""Simulation scenarios and the type-I/power, relative-MSE and Γ-estimation studies.

Every dataset is a deterministic function of (scenario.seed, replicate index):
randomness comes from ``numpy.random.SeedSequence`` children so replicates can run
in any order, on any number of workers, and reproduce bit for bit.
"""

import dataclasses
import logging
import math
import tomllib
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from batchmiss.config import FitConfig
from batchmiss.ecm import FitError, FitResult, InconsistentMechanismError, fit
from batchmiss.inference import BaselineError, permutation_test, relative_abundance_baseline
from batchmiss.ingest import StudyData, apply_reference_filter, write_study
from batchmiss.log import info_event, warning_event
from batchmiss.mechanism import (
    ClampCounter,
    GammaEstimate,
    MechanismEstimationError,
    MechanismFitInput,
    estimate_gamma,
    estimate_logit_gamma,
    miss_prob,
)
from batchmiss.models import BatchDesign, FeatureBatchData, MissingMechanism, ModelParameters
from batchmiss.pool import run_ordered

logger = logging.getLogger("batchmiss.simulation")

# Names of the simulated fixed-effect columns
COLUMN_NAMES = ("intercept", "reference", "group")
GROUP_COLUMN = 2
CUTOFFS = (0.05, 0.01)

_VARIANCES = {"large": (2.0, 4.0, 3.0), "small": (1.0, 2.0, 1.0)}
_POWER_EFFECT = {40: 0.7, 200: 0.3}
# Study index reserved for the logit calibration pool
_CALIBRATION_STUDY = 2**31 - 1


class DegenerateDatasetError(ValueError):
    """Raised when a generated replicate has no observed batch."""


@dataclass(frozen=True)
class Scenario:
    """Parameters of one simulation setting."""

    name: str = "custom"
    q: int = 40
    p: int = 4
    # Effect size: α = (intercept, -a, a)
    a: float = 0.7
    intercept: float = 10.0
    # Per-feature intercepts are drawn N(intercept, intercept_sd²) when > 0
    intercept_sd: float = 0.0
    sigma0_sq: float = 2.0
    sigma_sq: float = 4.0
    d: float = 3.0
    gamma0: float = 0.0
    gamma: float = 0.1
    sporadic_rate: float = 0.05
    n_replicates: int = 1000
    seed: int = 20151

    def __post_init__(self) -> None:
        if self.q < 2:
            raise ValueError("scenario needs q >= 2")
        if self.p < 2:
            raise ValueError("scenario needs p >= 2 (a reference and at least one target)")
        if min(self.sigma0_sq, self.sigma_sq, self.d) <= 0:
            raise ValueError("scenario variances must be positive")
        if not 0.0 <= self.sporadic_rate < 1.0:
            raise ValueError("sporadic_rate must lie in [0, 1)")
        if self.intercept_sd < 0:
            raise ValueError("intercept_sd must be non-negative")
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be at least 1")
        if self.gamma0 < 0 or self.gamma < 0:
            raise ValueError("scenario mechanism needs gamma0 >= 0 and gamma >= 0")

    @property
    def alpha(self) -> np.ndarray:
        return np.array([self.intercept, -self.a, self.a])

    @property
    def mechanism(self) -> MissingMechanism:
        return MissingMechanism.exponential(self.gamma0, self.gamma)

    @property
    def truth(self) -> ModelParameters:
        return ModelParameters(
            alpha=self.alpha,
            sigma0_sq=self.sigma0_sq,
            sigma_sq=self.sigma_sq,
            d=[[self.d]],
        )

    @property
    def variance_label(self) -> str:
        for label, values in _VARIANCES.items():
            if (self.sigma0_sq, self.sigma_sq, self.d) == values:
                return label
        return "custom"

    def with_overrides(self, **changes: Any) -> "Scenario":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_file(cls, path: str | Path) -> "Scenario":
        """Read a flat ``key = value`` TOML file; ``preset`` selects the starting point."""
        with open(path, "rb") as f:
            raw = tomllib.load(f)
        base = PRESETS[str(raw.pop("preset"))] if "preset" in raw else cls()
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"scenario file {path}: unknown keys {unknown}")
        nested = [k for k, v in raw.items() if isinstance(v, dict)]
        if nested:
            raise ValueError(f"scenario file {path}: tables are not allowed ({nested})")
        return base.with_overrides(**raw)


def _build_presets() -> dict[str, Scenario]:
    presets: dict[str, Scenario] = {}
    for q in (40, 200):
        for label, (s0, s, d) in _VARIANCES.items():
            for kind, a in (("null", 0.0), ("power", _POWER_EFFECT[q])):
                name = f"table1-q{q}-{label}-{kind}"
                presets[name] = Scenario(name=name, q=q, a=a, sigma0_sq=s0, sigma_sq=s, d=d)
        presets[f"table2-q{q}"] = Scenario(name=f"table2-q{q}", q=q, a=1.0)
        presets[f"table3-q{q}"] = Scenario(
            name=f"table3-q{q}", q=q, a=1.0, intercept_sd=2.0, n_replicates=100
        )
    return presets


PRESETS: dict[str, Scenario] = _build_presets()


def table1_scenarios() -> list[Scenario]:
    return [s for name, s in PRESETS.items() if name.startswith("table1-")]


# -- Data generation ------------------------------------------------------------------


def simulate_designs(scenario: Scenario) -> tuple[BatchDesign, ...]:
    """Row 0 of every batch is the reference; target rows alternate between groups."""
    designs = []
    targets = scenario.p - 1
    for i in range(scenario.q):
        x = np.zeros((scenario.p, 3))
        x[:, 0] = 1.0
        x[0, 1] = 1.0
        x[1:, 2] = (i * targets + np.arange(targets)) % 2
        designs.append(BatchDesign(x=x, z=np.ones((scenario.p, 1)), reference_channel=0))
    return tuple(designs)


@dataclass(frozen=True, eq=False)
class Replicate:
    data: FeatureBatchData
    designs: tuple[BatchDesign, ...]
    truth: ModelParameters


def replicate_seed(scenario: Scenario, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([scenario.seed, *keys])


def derived_seed(seed: np.random.SeedSequence) -> int:
    return int(seed.generate_state(1)[0])


def _draw_feature(
    scenario: Scenario,
    designs: Sequence[BatchDesign],
    rng: np.random.Generator,
    feature_id: str,
) -> tuple[FeatureBatchData, ModelParameters]:
    q, p = scenario.q, scenario.p
    truth = scenario.truth
    if scenario.intercept_sd > 0:
        alpha = truth.alpha.copy()
        alpha[0] = rng.normal(scenario.intercept, scenario.intercept_sd)
        truth = dataclasses.replace(truth, alpha=alpha)

    b = rng.normal(0.0, math.sqrt(scenario.d), size=q)
    sd = np.full(p, math.sqrt(scenario.sigma_sq))
    sd[0] = math.sqrt(scenario.sigma0_sq)
    e = rng.normal(0.0, 1.0, size=(q, p)) * sd
    u_batch = rng.random(q)
    u_sample = rng.random((q, p))

    mech = scenario.mechanism
    clamps = ClampCounter()
    batches = []
    masks = []
    missing = np.zeros(q, dtype=bool)
    for i, design in enumerate(designs):
        y = design.x @ truth.alpha + b[i] + e[i]
        if u_batch[i] < miss_prob(mech, float(y.mean()), clamps=clamps):
            missing[i] = True
            mask = np.zeros(p, dtype=bool)
        else:
            mask = u_sample[i] >= scenario.sporadic_rate
            if not mask.any():
                missing[i] = True
        batches.append(y)
        masks.append(mask)

    data = FeatureBatchData(
        batches=tuple(batches),
        batch_missing=missing,
        sporadic_mask=tuple(masks),
        feature_id=feature_id,
    )
    return data, truth


def generate_replicate(scenario: Scenario, replicate_index: int) -> Replicate:
    """One simulated feature; deterministic given (scenario.seed, replicate_index)."""
    designs = simulate_designs(scenario)
    rng = np.random.default_rng(replicate_seed(scenario, replicate_index))
    data, truth = _draw_feature(scenario, designs, rng, f"rep{replicate_index}")
    if data.q_obs == 0:
        raise DegenerateDatasetError(
            f"{scenario.name} replicate {replicate_index}: every batch is missing"
        )
    return Replicate(data=data, designs=designs, truth=truth)


@dataclass(frozen=True, eq=False)
class SimulatedStudy:
    features: tuple[FeatureBatchData, ...]
    designs: tuple[BatchDesign, ...]
    truths: tuple[ModelParameters, ...]
    scenario: Scenario

    def to_study_data(self, min_ref_obs_frac: float = 0.7) -> StudyData:
        """The in-memory equivalent of exporting the study and ingesting it back."""
        kept, excluded = apply_reference_filter(self.features, self.designs, min_ref_obs_frac)
        return StudyData(
            features=tuple(kept),
            designs=self.designs,
            column_names=COLUMN_NAMES,
            excluded=tuple(excluded),
            batch_ids=batch_ids(self.scenario),
        )


def simulate_study(scenario: Scenario, n_features: int, study_index: int = 0) -> SimulatedStudy:
    """Many features measured on one shared set of batches.

    Features whose batches are all missing are kept; downstream filters decide.
    """
    designs = simulate_designs(scenario)
    features = []
    truths = []
    for j in range(n_features):
        rng = np.random.default_rng(replicate_seed(scenario, study_index, j))
        data, truth = _draw_feature(scenario, designs, rng, f"f{j:05d}")
        features.append(data)
        truths.append(truth)
    return SimulatedStudy(
        features=tuple(features), designs=designs, truths=tuple(truths), scenario=scenario
    )


def sample_ids(scenario: Scenario) -> list[list[str]]:
    return [[f"b{i:03d}c{j}" for j in range(scenario.p)] for i in range(scenario.q)]


def batch_ids(scenario: Scenario) -> tuple[str, ...]:
    return tuple(f"batch{i:03d}" for i in range(scenario.q))


def export_study(study: SimulatedStudy, directory: str | Path) -> dict[str, Path]:
    """Write the study as abundance, batch-map and covariate TSV files."""
    ids = sample_ids(study.scenario)
    covariates = {
        sid: {"group": float(design.x[j, GROUP_COLUMN])}
        for design, row in zip(study.designs, ids, strict=True)
        for j, sid in enumerate(row)
    }
    return write_study(
        directory,
        features=study.features,
        sample_ids=ids,
        batch_ids=batch_ids(study.scenario),
        reference_channels=[d.reference_channel for d in study.designs],
        covariates=covariates,
    )


def calibrate_logit_mechanism(
    scenario: Scenario, n_features: int = 1000, intercept_sd: float = 2.0
) -> GammaEstimate:
    """Fit a logit curve to the missing pattern of a feature pool generated under ``scenario``."""
    pool = simulate_study(
        scenario.with_overrides(intercept_sd=intercept_sd),
        n_features,
        study_index=_CALIBRATION_STUDY,
    )
    return estimate_logit_gamma([MechanismFitInput.from_feature(f) for f in pool.features])


# -- Type I error and power ----------------------------------------------------------------

_MIXEMM_BADMM = "mixemm_badmm"
_MIXEMM_MAR = "mixemm_mar"
_BASELINE = "relative_abundance"
TABLE1_METHODS = (_MIXEMM_BADMM, _MIXEMM_MAR, _BASELINE)


@dataclass(frozen=True)
class _Table1Task:
    scenario: Scenario
    index: int
    permutations: int
    fit_config: FitConfig


def _table1_replicate(task: _Table1Task) -> dict[str, float]:
    scenario = task.scenario
    try:
        rep = generate_replicate(scenario, task.index)
    except DegenerateDatasetError as exc:
        warning_event(logger, "replicate_failed", "Replicate generation failed", err=str(exc))
        return {}

    seed = derived_seed(replicate_seed(scenario, task.index, 1))
    tested = [GROUP_COLUMN]
    p_values: dict[str, float] = {}
    for method, mech in (
        (_MIXEMM_BADMM, scenario.mechanism),
        (_MIXEMM_MAR, MissingMechanism.exponential(0.0, 0.0)),
    ):
        try:
            result = permutation_test(
                rep.data, rep.designs, mech, task.fit_config, tested, task.permutations, seed
            )
        except (FitError, ArithmeticError, InconsistentMechanismError) as exc:
            warning_event(
                logger,
                "replicate_failed",
                "Replicate fit failed",
                scenario=scenario.name,
                replicate=task.index,
                method=method,
                err=str(exc),
            )
            continue
        p_values[method] = result.coefficients[0].p_perm
    try:
        baseline = relative_abundance_baseline(
            rep.data, rep.designs, tested, task.permutations, seed
        )
        p_values[_BASELINE] = baseline.coefficients[0].p_perm
    except BaselineError as exc:
        warning_event(
            logger,
            "replicate_failed",
            "Baseline regression failed",
            scenario=scenario.name,
            replicate=task.index,
            method=_BASELINE,
            err=str(exc),
        )
    return p_values


def run_table1(
    scenarios: Sequence[Scenario] | None = None,
    *,
    permutations: int = 999,
    workers: int = 1,
    fit_config: FitConfig | None = None,
) -> pd.DataFrame:
    """Rejection rates of the three tests at each p-value cutoff."""
    scenarios = list(scenarios) if scenarios is not None else table1_scenarios()
    fit_config = fit_config or FitConfig()
    tasks = [
        _Table1Task(scenario=s, index=r, permutations=permutations, fit_config=fit_config)
        for s in scenarios
        for r in range(s.n_replicates)
    ]
    info_event(
        logger,
        "table1_start",
        "Running type I error / power study",
        scenarios=len(scenarios),
        replicates=len(tasks),
        permutations=permutations,
    )
    outcomes = run_ordered(_table1_replicate, tasks, workers)

    rows = []
    for scenario in scenarios:
        mine = [o for t, o in zip(tasks, outcomes, strict=True) if t.scenario is scenario]
        for cutoff in CUTOFFS:
            for method in TABLE1_METHODS:
                p = np.array([o[method] for o in mine if method in o and not math.isnan(o[method])])
                rows.append(
                    {
                        "scenario": scenario.name,
                        "q": scenario.q,
                        "variance": scenario.variance_label,
                        "a": scenario.a,
                        "cutoff": cutoff,
                        "method": method,
                        "rejection_rate": float(np.mean(p < cutoff)) if p.size else math.nan,
                        "n_success": int(p.size),
                        "permutations": permutations,
                    }
                )
    return pd.DataFrame(rows)


# -- Relative MSE ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _SquaredErrors:
    alpha: float
    sigma0_sq: float
    sigma_sq: float
    d: float
    seconds: float


def _squared_errors(result: FitResult, truth: ModelParameters) -> _SquaredErrors:
    est = result.params
    return _SquaredErrors(
        alpha=float(np.sum((est.alpha - truth.alpha) ** 2)),
        sigma0_sq=(est.sigma0_sq - truth.sigma0_sq) ** 2,
        sigma_sq=(est.sigma_sq - truth.sigma_sq) ** 2,
        d=float(np.sum((est.d - truth.d) ** 2)),
        seconds=result.seconds,
    )


@dataclass(frozen=True)
class _Table2Task:
    scenario: Scenario
    index: int
    logit: MissingMechanism | None
    fit_config: FitConfig


_MSE_FIELDS = ("alpha", "sigma0_sq", "sigma_sq", "d")
ALPHA_MSE_DEFINITION = "MSE(α) sums squared errors over all components of α, intercept included"


def _table2_replicate(task: _Table2Task) -> dict[str, _SquaredErrors]:
    try:
        rep = generate_replicate(task.scenario, task.index)
    except DegenerateDatasetError as exc:
        warning_event(logger, "replicate_failed", "Replicate generation failed", err=str(exc))
        return {}

    mechanisms = {
        "mar": MissingMechanism.exponential(0.0, 0.0),
        "exponential": task.scenario.mechanism,
    }
    if task.logit is not None:
        mechanisms["logit"] = task.logit
    errors: dict[str, _SquaredErrors] = {}
    for label, mech in mechanisms.items():
        try:
            result = fit(rep.data, rep.designs, mech, task.fit_config)
        except (FitError, ArithmeticError, InconsistentMechanismError) as exc:
            warning_event(
                logger,
                "replicate_failed",
                "Replicate fit failed",
                scenario=task.scenario.name,
                replicate=task.index,
                method=label,
                err=str(exc),
            )
            continue
        errors[label] = _squared_errors(result, rep.truth)
    return errors


def run_table2(
    scenario: Scenario,
    *,
    logit: bool = True,
    logit_replicates: int | None = None,
    workers: int = 1,
    fit_config: FitConfig | None = None,
) -> pd.DataFrame:
    """MSE of the BADMM fits relative to the MAR fit, per parameter.

    Each replicate contributes Σ_k (α̂_k - α_k)² to MSE(α) and the squared
    Frobenius error to MSE(D); the ratio is of the means over replicates.

    The logit analysis uses a curve fitted to the generated missing pattern and
    runs on the first ``logit_replicates`` replicates only.
    """
    fit_config = fit_config or FitConfig()
    logit_mech = None
    if logit:
        calibrated = calibrate_logit_mechanism(scenario)
        logit_mech = calibrated.to_mechanism()
        info_event(
            logger,
            "logit_calibrated",
            "Calibrated logit mechanism",
            gamma0=calibrated.gamma0,
            gamma=calibrated.gamma,
        )
    n_logit = scenario.n_replicates if logit_replicates is None else logit_replicates
    tasks = [
        _Table2Task(
            scenario=scenario,
            index=r,
            logit=logit_mech if r < n_logit else None,
            fit_config=fit_config,
        )
        for r in range(scenario.n_replicates)
    ]
    info_event(
        logger,
        "table2_start",
        "Running relative MSE study",
        scenario=scenario.name,
        replicates=len(tasks),
        logit_replicates=n_logit if logit else 0,
    )
    outcomes = run_ordered(_table2_replicate, tasks, workers)

    rows = []
    for method in ("exponential", "logit") if logit else ("exponential",):
        paired = [(o["mar"], o[method]) for o in outcomes if "mar" in o and method in o]
        row: dict[str, Any] = {"method": method, "q": scenario.q, "n_success": len(paired)}
        for name in _MSE_FIELDS:
            mar = np.mean([getattr(m, name) for m, _ in paired]) if paired else math.nan
            badmm = np.mean([getattr(b, name) for _, b in paired]) if paired else math.nan
            row[f"rel_mse_{name}"] = float(badmm / mar) if mar > 0 else math.nan
        row["seconds_badmm"] = float(sum(b.seconds for _, b in paired))
        row["seconds_mar"] = float(sum(m.seconds for m, _ in paired))
        rows.append(row)
    return pd.DataFrame(rows)


# -- Γ estimation -------------------------------------------------------------------------------


@dataclass(frozen=True)
class _Table3Task:
    scenario: Scenario
    repetition: int
    n_features: int


def _table3_repetition(task: _Table3Task) -> GammaEstimate | None:
    study = simulate_study(task.scenario, task.n_features, study_index=task.repetition)
    try:
        return estimate_gamma([MechanismFitInput.from_feature(f) for f in study.features])
    except MechanismEstimationError as exc:
        warning_event(
            logger,
            "repetition_failed",
            "Γ estimation failed",
            scenario=task.scenario.name,
            repetition=task.repetition,
            err=str(exc),
        )
        return None


def run_table3(scenario: Scenario, *, n_features: int = 1000, workers: int = 1) -> pd.DataFrame:
    """Distribution of the available-case Γ estimate over repeated studies."""
    tasks = [
        _Table3Task(scenario=scenario, repetition=r, n_features=n_features)
        for r in range(scenario.n_replicates)
    ]
    info_event(
        logger,
        "table3_start",
        "Running Γ estimation study",
        scenario=scenario.name,
        repetitions=len(tasks),
        features=n_features,
    )
    estimates = [e for e in run_ordered(_table3_repetition, tasks, workers) if e is not None]

    rows = []
    for parameter, true_value in (("gamma", scenario.gamma), ("gamma0", scenario.gamma0)):
        values = np.array([getattr(e, parameter) for e in estimates])
        empty = values.size == 0
        rows.append(
            {
                "q": scenario.q,
                "parameter": parameter,
                "true_value": true_value,
                "min": math.nan if empty else float(values.min()),
                "median": math.nan if empty else float(np.median(values)),
                "mean": math.nan if empty else float(values.mean()),
                "max": math.nan if empty else float(values.max()),
                "n_success": int(values.size),
            }
        )
    return pd.DataFrame(rows)


def format_table(frame: pd.DataFrame, title: str) -> str:
    """Human-readable rendering of a results table."""
    body = frame.to_string(index=False, float_format=lambda v: f"{v:.3f}")
    return f"{title}\n{body}\n"
