"""Whole-dataset orchestration: Γ selection, per-feature tests and result files."""

import logging
import math
import zlib
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from batchmiss.config import BatchmissConfig, FitConfig, parse_grid
from batchmiss.ecm import (
    InconsistentMechanismError,
    ProfilePoint,
    best_profile_index,
    pooled_profile_point,
    profile_point,
)
from batchmiss.inference import TestResult, permutation_test
from batchmiss.ingest import StudyData, StudyInput, ingest
from batchmiss.log import info_event, warning_event
from batchmiss.mechanism import (
    BadmmDiagnostic,
    GammaEstimate,
    MechanismEstimationError,
    MechanismFitInput,
    badmm_diagnostic,
    estimate_gamma,
    estimate_logit_gamma,
)
from batchmiss.models import BatchDesign, FeatureBatchData, MechanismForm, MissingMechanism
from batchmiss.pool import Sink, map_ordered
from batchmiss.report import format_p, write_diagnostic, write_rows, write_summary
from batchmiss.validation import DatasetError

logger = logging.getLogger("batchmiss.study")

FAMILY_ALPHA = 0.05
_UNTESTED = frozenset({"intercept", "reference"})
_PROGRESS_EVERY = 500

# Per-feature failures that leave the rest of the study intact
_FEATURE_ERRORS = (ArithmeticError, RuntimeError, InconsistentMechanismError, DatasetError)


class StudyError(ValueError):
    """The study as configured cannot be analysed."""


def feature_seed(master_seed: int, feature_id: str) -> int:
    """Permutation seed for one feature, independent of its position in the input."""
    sequence = np.random.SeedSequence([master_seed, zlib.crc32(feature_id.encode("utf-8"))])
    return int(sequence.generate_state(1)[0])


def resolve_tested(column_names: Sequence[str], requested: Sequence[str]) -> list[int]:
    """Column indices to test; every non-intercept, non-reference column by default."""
    if requested:
        unknown = [name for name in requested if name not in column_names]
        if unknown:
            raise StudyError(
                f"[inference].tested names unknown columns {unknown}; "
                f"available: {list(column_names)}"
            )
        return [column_names.index(name) for name in requested]
    tested = [i for i, name in enumerate(column_names) if name not in _UNTESTED]
    if not tested:
        raise StudyError("no covariate columns to test; supply a covariates file")
    return tested


def bonferroni_threshold(n_features: int) -> float:
    return FAMILY_ALPHA / n_features if n_features else math.nan


@dataclass(frozen=True, eq=False)
class FeatureTask:
    data: FeatureBatchData
    designs: tuple[BatchDesign, ...]
    mechanism: MissingMechanism
    fit_config: FitConfig
    tested: tuple[int, ...]
    names: tuple[str, ...]
    permutations: int
    seed: int


@dataclass(frozen=True, eq=False)
class FeatureOutcome:
    feature_id: str
    q: int
    q_obs: int
    missing_fraction: float
    test: TestResult | None = None
    error_type: str | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.test is None


def run_feature(task: FeatureTask) -> FeatureOutcome:
    """Fit and test one feature; failures are captured on the outcome."""
    data = task.data
    base: dict[str, Any] = {
        "feature_id": data.feature_id,
        "q": data.q,
        "q_obs": data.q_obs,
        "missing_fraction": data.missing_fraction,
    }
    try:
        test = permutation_test(
            data,
            task.designs,
            task.mechanism,
            task.fit_config,
            task.tested,
            task.permutations,
            task.seed,
            names=task.names,
        )
    except _FEATURE_ERRORS as exc:
        return FeatureOutcome(**base, error_type=type(exc).__name__, error=str(exc))
    return FeatureOutcome(**base, test=test)


@dataclass(frozen=True, eq=False)
class _ProfileTask:
    data: FeatureBatchData
    designs: tuple[BatchDesign, ...]
    mechanism: MissingMechanism
    fit_config: FitConfig


def _profile_task(task: _ProfileTask) -> ProfilePoint:
    return profile_point(task.data, task.designs, task.mechanism, task.fit_config)


@dataclass(frozen=True)
class StudyProfileRow:
    # Exponential rows carry the γ₀ maximizing the summed likelihood at their γ
    mechanism: MissingMechanism
    # Sum over retained features; NaN when a feature fit failed
    loglik: float
    n_failed: int


@dataclass(frozen=True, eq=False)
class StudyResult:
    outcomes: tuple[FeatureOutcome, ...]
    mechanism: MissingMechanism
    gamma_source: str
    estimate: GammaEstimate | None
    diagnostic: BadmmDiagnostic
    column_names: tuple[str, ...]
    tested: tuple[int, ...]
    excluded: tuple[str, ...] = ()
    profile: tuple[StudyProfileRow, ...] = ()
    profile_best: int | None = None
    paths: dict[str, Path] = field(default_factory=dict)

    @property
    def n_failed(self) -> int:
        return sum(1 for o in self.outcomes if o.failed)

    @property
    def bonferroni(self) -> float:
        return bonferroni_threshold(len(self.outcomes))

    def significant(self) -> list[FeatureOutcome]:
        threshold = self.bonferroni
        return [
            o
            for o in self.outcomes
            if o.test is not None and any(c.p_perm < threshold for c in o.test.coefficients)
        ]


def _mechanism(form: MechanismForm, gamma0: float, gamma: float) -> MissingMechanism:
    if form is MechanismForm.LOGIT:
        return MissingMechanism.logit(gamma0, gamma)
    return MissingMechanism.exponential(gamma0, gamma)


def _estimate(inputs: Sequence[MechanismFitInput], form: MechanismForm) -> GammaEstimate:
    if form is MechanismForm.LOGIT:
        return estimate_logit_gamma(inputs)
    return estimate_gamma(inputs)


class StudyRunner:
    """Runs every retained feature of a study under one shared Γ."""

    def __init__(self, config: BatchmissConfig) -> None:
        self._config = config
        self._form = MechanismForm(config.mechanism.form)

    async def run(self, study: StudyData, out_dir: str | Path | None = None) -> StudyResult:
        if not study.features:
            raise StudyError("no features left after filtering")
        config = self._config
        tested = resolve_tested(study.column_names, config.inference.tested)
        inputs = [MechanismFitInput.from_feature(f) for f in study.features]

        estimate: GammaEstimate | None = None
        profile: tuple[StudyProfileRow, ...] = ()
        profile_best: int | None = None
        source = config.mechanism.source
        if source == "estimated":
            try:
                estimate = _estimate(inputs, self._form)
            except MechanismEstimationError as exc:
                raise StudyError(f"cannot estimate the missing-data mechanism: {exc}") from exc
            mechanism = estimate.to_mechanism()
        elif source == "profiled":
            profile, profile_best = await self._profile(study)
            mechanism = profile[profile_best].mechanism
        else:
            mechanism = _mechanism(self._form, config.mechanism.gamma0, config.mechanism.gamma)

        diagnostic = badmm_diagnostic(inputs, estimate or self._diagnostic_estimate(inputs))
        info_event(
            logger,
            "study_mechanism",
            "Missing-data mechanism selected",
            source=source,
            mechanism=mechanism.describe(),
            features=len(study.features),
        )

        names = tuple(study.column_names)
        tasks = [
            FeatureTask(
                data=feature,
                designs=study.designs,
                mechanism=mechanism,
                fit_config=config.fit,
                tested=tuple(tested),
                names=names,
                permutations=config.inference.permutations,
                seed=feature_seed(config.inference.seed, feature.feature_id),
            )
            for feature in study.features
        ]
        outcomes = await map_ordered(
            run_feature,
            tasks,
            workers=config.run.threads,
            sink=self._progress(len(tasks)),
        )

        result = StudyResult(
            outcomes=tuple(outcomes),
            mechanism=mechanism,
            gamma_source=source,
            estimate=estimate,
            diagnostic=diagnostic,
            column_names=names,
            tested=tuple(tested),
            excluded=study.excluded,
            profile=profile,
            profile_best=profile_best,
        )
        target = Path(out_dir if out_dir is not None else config.run.out_dir)
        result.paths.update(self._write(result, target))
        info_event(
            logger,
            "study_done",
            "Study finished",
            features=len(outcomes),
            failed=result.n_failed,
            significant=len(result.significant()),
            bonferroni=result.bonferroni,
            out_dir=str(target),
        )
        return result

    def _diagnostic_estimate(self, inputs: Sequence[MechanismFitInput]) -> GammaEstimate | None:
        try:
            return _estimate(inputs, self._form)
        except MechanismEstimationError:
            return None

    def _progress(self, total: int) -> Sink[FeatureOutcome]:
        def sink(index: int, outcome: FeatureOutcome) -> None:
            if outcome.failed:
                warning_event(
                    logger,
                    "feature_failed",
                    "Feature fit failed; recorded in errors.tsv",
                    feature_id=outcome.feature_id,
                    error_type=outcome.error_type,
                    err=outcome.error,
                )
            done = index + 1
            if done % _PROGRESS_EVERY == 0 or done == total:
                info_event(logger, "study_progress", "Features processed", done=done, total=total)

        return sink

    async def _profile(self, study: StudyData) -> tuple[tuple[StudyProfileRow, ...], int]:
        mech = self._config.mechanism
        if not mech.profile_grid:
            raise StudyError("[mechanism].profile_grid is required when source = 'profiled'")
        grid = [_mechanism(self._form, mech.gamma0, g) for g in parse_grid(mech.profile_grid)]
        tasks = [
            _ProfileTask(feature, study.designs, point, self._config.fit)
            for point in grid
            for feature in study.features
        ]
        points = await map_ordered(_profile_task, tasks, workers=self._config.run.threads)

        n = len(study.features)
        summed = []
        rows = []
        for g in range(len(grid)):
            chunk = points[g * n : (g + 1) * n]
            pooled = pooled_profile_point(chunk)
            summed.append(pooled)
            rows.append(
                StudyProfileRow(
                    mechanism=pooled.mechanism,
                    loglik=pooled.loglik,
                    n_failed=sum(1 for p in chunk if p.failed),
                )
            )

        best = best_profile_index(summed)
        if best is None:
            raise StudyError("no grid value of the profile likelihood is finite")
        info_event(
            logger,
            "profile_done",
            "Profile likelihood evaluated",
            grid=len(grid),
            best=rows[best].mechanism.describe(),
            loglik=rows[best].loglik,
        )
        return tuple(rows), best

    def _write(self, result: StudyResult, out_dir: Path) -> dict[str, Path]:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "results": write_rows(
                out_dir / "results.tsv",
                [_result_row(o, result) for o in result.outcomes],
                result_columns(result.column_names, result.tested),
            ),
            "errors": write_rows(
                out_dir / "errors.tsv",
                [
                    {"feature_id": o.feature_id, "error_type": o.error_type, "message": o.error}
                    for o in result.outcomes
                    if o.failed
                ],
                ["feature_id", "error_type", "message"],
            ),
        }
        paths.update(write_diagnostic(out_dir, result.diagnostic))
        if result.profile:
            paths["profile"] = write_rows(
                out_dir / "profile.tsv",
                [
                    {
                        "gamma0": row.mechanism.gamma0,
                        "gamma": row.mechanism.gamma,
                        "loglik": row.loglik,
                        "n_failed": row.n_failed,
                        "best": i == result.profile_best,
                    }
                    for i, row in enumerate(result.profile)
                ],
                ["gamma0", "gamma", "loglik", "n_failed", "best"],
            )
        paths["summary"] = write_summary(out_dir / "summary.json", self._summary(result))
        return paths

    def _summary(self, result: StudyResult) -> dict[str, Any]:
        inference = self._config.inference
        estimate = result.estimate
        diagnostic = result.diagnostic
        return {
            "mechanism": result.mechanism.describe(),
            "gamma_source": result.gamma_source,
            "gamma_estimate": None
            if estimate is None
            else {
                "gamma0": estimate.gamma0,
                "gamma": estimate.gamma,
                "n_used": estimate.n_used,
                "n_excluded": estimate.n_excluded,
            },
            "diagnostic_line": {
                "intercept": diagnostic.line_intercept,
                "slope": diagnostic.line_slope,
            },
            "n_features": len(result.outcomes),
            "n_excluded": len(result.excluded),
            "n_failed": result.n_failed,
            "n_not_converged": sum(
                1
                for o in result.outcomes
                if o.test is not None and o.test.fit is not None and not o.test.fit.converged
            ),
            "n_unreliable": sum(
                1 for o in result.outcomes if o.test is not None and o.test.unreliable
            ),
            "bonferroni_threshold": result.bonferroni,
            "n_significant": len(result.significant()),
            "tested": [result.column_names[i] for i in result.tested],
            "permutations": inference.permutations,
            "seed": inference.seed,
            "min_ref_obs_frac": self._config.run.min_ref_obs_frac,
        }


def result_columns(column_names: Sequence[str], tested: Sequence[int]) -> list[str]:
    columns = ["feature_id", "q_obs", "q", "missing_fraction", "converged", "iterations", "loglik"]
    for name in column_names:
        columns += [f"alpha_{name}", f"se_{name}"]
    for i in tested:
        columns += [f"z_{column_names[i]}", f"p_perm_{column_names[i]}"]
    columns += ["permutation_failures", "unreliable"]
    return columns


def _result_row(outcome: FeatureOutcome, result: StudyResult) -> dict[str, Any]:
    row: dict[str, Any] = {
        "feature_id": outcome.feature_id,
        "q_obs": outcome.q_obs,
        "q": outcome.q,
        "missing_fraction": outcome.missing_fraction,
    }
    test = outcome.test
    if test is None or test.fit is None:
        row["converged"] = False
        return row
    fit = test.fit
    row.update(converged=fit.converged, iterations=fit.n_iter, loglik=fit.loglik)
    se = fit.alpha_se
    for i, name in enumerate(result.column_names):
        row[f"alpha_{name}"] = float(fit.params.alpha[i])
        row[f"se_{name}"] = float(se[i])
    for coefficient in test.coefficients:
        row[f"z_{coefficient.name}"] = coefficient.wald_z
        row[f"p_perm_{coefficient.name}"] = format_p(coefficient.p_perm)
    row.update(permutation_failures=test.n_failed, unreliable=test.unreliable)
    return row


async def run_study(study: StudyInput, out_dir: str | Path | None = None) -> StudyResult:
    """Ingest the study files and analyse every retained feature."""
    data = ingest(study)
    return await StudyRunner(study.config).run(data, out_dir)
