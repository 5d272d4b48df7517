"""Command-line entry points: ``batchmiss`` (study analysis) and ``batchmiss-tables``."""

import argparse
import asyncio
import dataclasses
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from batchmiss.config import BatchmissConfig, load_config, validate_config
from batchmiss.ingest import IngestError, StudyInput
from batchmiss.log import error_event, info_event, setup_logging
from batchmiss.report import write_frame
from batchmiss.simulation import (
    ALPHA_MSE_DEFINITION,
    PRESETS,
    Scenario,
    format_table,
    run_table1,
    run_table2,
    run_table3,
    table1_scenarios,
)
from batchmiss.study import run_study
from batchmiss.validation import DatasetError

logger = logging.getLogger("batchmiss.cli")

EXIT_OK = 0
EXIT_INPUT_ERROR = 2

_FORMS = {"exp": "exponential", "logit": "logit"}
_INPUT_ERRORS = (IngestError, DatasetError, ValueError, FileNotFoundError)


def _fail(message: str) -> int:
    print(f"batchmiss: error: {message}", file=sys.stderr)
    return EXIT_INPUT_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="batchmiss",
        description="Fit batch mixed models under batch-level abundance-dependent missingness.",
        epilog="Flags override values read from --config; environment variables are ignored.",
    )
    parser.add_argument("--abundance", required=True, type=Path, help="Feature × sample TSV")
    parser.add_argument(
        "--batch-map",
        required=True,
        type=Path,
        help="TSV with sample_id, batch_id, channel, is_reference",
    )
    parser.add_argument("--covariates", type=Path, help="TSV of covariates keyed by sample_id")
    parser.add_argument("--config", type=Path, help="TOML configuration file")
    parser.add_argument("--mechanism", choices=sorted(_FORMS), help="Missing-data mechanism form")
    parser.add_argument("--gamma0", type=float, help="Mechanism intercept γ₀ (fixed Γ)")
    parser.add_argument("--gamma", type=float, help="Mechanism slope γ (fixed Γ)")
    source = parser.add_mutually_exclusive_group()
    source.add_argument(
        "--estimate-gamma",
        action="store_true",
        help="Estimate Γ from the available-case missing pattern of all retained features",
    )
    source.add_argument(
        "--profile-gamma",
        metavar="G0:G1:STEP",
        help="Choose γ by profile likelihood over an inclusive grid",
    )
    parser.add_argument("--permutations", type=int, help="Batch permutations per feature")
    parser.add_argument("--seed", type=int, help="Master seed for permutations")
    parser.add_argument("--max-iter", type=int, help="Maximum ECM iterations")
    parser.add_argument("--tol", type=float, help="ECM relative convergence tolerance")
    parser.add_argument("--threads", type=int, help="Worker processes")
    parser.add_argument(
        "--min-ref-obs-frac",
        type=float,
        help="Keep features whose reference channel is observed in at least this fraction",
    )
    parser.add_argument("--out", type=Path, help="Output directory")
    return parser


def apply_overrides(config: BatchmissConfig, args: argparse.Namespace) -> BatchmissConfig:
    """Layer command-line flags on top of the file configuration."""
    mechanism = config.mechanism
    if args.mechanism is not None:
        mechanism.form = _FORMS[args.mechanism]
    if args.gamma0 is not None:
        mechanism.gamma0 = args.gamma0
    if args.gamma is not None:
        mechanism.gamma = args.gamma
    if args.estimate_gamma:
        mechanism.source = "estimated"
    if args.profile_gamma is not None:
        mechanism.source = "profiled"
        mechanism.profile_grid = args.profile_gamma

    fit_changes: dict[str, Any] = {}
    if args.max_iter is not None:
        fit_changes["max_iter"] = args.max_iter
    if args.tol is not None:
        fit_changes["tol"] = args.tol
    if fit_changes:
        config.fit = dataclasses.replace(config.fit, **fit_changes)

    if args.permutations is not None:
        config.inference.permutations = args.permutations
    if args.seed is not None:
        config.inference.seed = args.seed
    if args.threads is not None:
        config.run.threads = args.threads
    if args.min_ref_obs_frac is not None:
        config.run.min_ref_obs_frac = args.min_ref_obs_frac
    if args.out is not None:
        config.run.out_dir = str(args.out)
    return validate_config(config)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = apply_overrides(load_config(args.config), args)
    except (ValueError, FileNotFoundError) as exc:
        return _fail(str(exc))

    setup_logging(config.logging)
    info_event(
        logger,
        "run_start",
        "batchmiss starting",
        abundance=str(args.abundance),
        batch_map=str(args.batch_map),
        covariates=str(args.covariates) if args.covariates else None,
        mechanism=config.mechanism.form,
        gamma_source=config.mechanism.source,
    )
    study = StudyInput(
        abundance_path=args.abundance,
        batch_map_path=args.batch_map,
        covariates_path=args.covariates,
        config=config,
    )
    try:
        result = asyncio.run(run_study(study))
    except _INPUT_ERRORS as exc:
        error_event(logger, "run_failed", "Input rejected", err=str(exc))
        return _fail(str(exc))

    print(
        f"{len(result.outcomes)} features analysed, {result.n_failed} failed, "
        f"{len(result.significant())} below the Bonferroni threshold {result.bonferroni:.3g}; "
        f"results in {config.run.out_dir}"
    )
    return EXIT_OK


# -- Simulation tables -----------------------------------------------------------------------


def build_tables_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="batchmiss-tables",
        description="Run the type I error/power, relative MSE and Γ estimation simulations.",
    )
    parser.add_argument("--table", type=int, choices=(1, 2, 3), required=True)
    parser.add_argument(
        "--q",
        type=int,
        choices=(40, 200),
        default=40,
        help="Number of batches for tables 2 and 3 (default: 40)",
    )
    parser.add_argument("--scenario", type=Path, help="Scenario TOML replacing the presets")
    parser.add_argument("--replicates", type=int, help="Replicates per scenario")
    parser.add_argument("--permutations", type=int, default=999, help="Table 1 (default: 999)")
    parser.add_argument(
        "--logit-replicates",
        type=int,
        help="Replicates also analysed with the logit mechanism in table 2 (default: all)",
    )
    parser.add_argument("--no-logit", action="store_true", help="Skip the logit analysis")
    parser.add_argument(
        "--features", type=int, default=1000, help="Features per study in table 3 (default: 1000)"
    )
    parser.add_argument("--workers", type=int, default=1, help="Worker processes (default: 1)")
    parser.add_argument("--seed", type=int, help="Override the scenario seed")
    parser.add_argument("--config", type=Path, help="TOML file for [fit] and [logging]")
    parser.add_argument("--out", type=Path, default=Path("tables"), help="Output directory")
    return parser


def _scenarios(args: argparse.Namespace) -> list[Scenario]:
    if args.scenario is not None:
        scenarios = [Scenario.from_file(args.scenario)]
    elif args.table == 1:
        scenarios = table1_scenarios()
    else:
        scenarios = [PRESETS[f"table{args.table}-q{args.q}"]]
    changes: dict[str, Any] = {}
    if args.replicates is not None:
        changes["n_replicates"] = args.replicates
    if args.seed is not None:
        changes["seed"] = args.seed
    return [s.with_overrides(**changes) for s in scenarios] if changes else scenarios


def tables_main(argv: Sequence[str] | None = None) -> int:
    args = build_tables_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        scenarios = _scenarios(args)
    except (ValueError, FileNotFoundError) as exc:
        return _fail(str(exc))
    if args.workers < 1:
        return _fail("--workers must be at least 1")

    setup_logging(config.logging)
    if args.table == 1:
        frame = run_table1(
            scenarios,
            permutations=args.permutations,
            workers=args.workers,
            fit_config=config.fit,
        )
        title = "Type I error and power"
    elif args.table == 2:
        frame = run_table2(
            scenarios[0],
            logit=not args.no_logit,
            logit_replicates=args.logit_replicates,
            workers=args.workers,
            fit_config=config.fit,
        )
        title = f"Relative MSE, Q = {scenarios[0].q}\n{ALPHA_MSE_DEFINITION}"
    else:
        frame = run_table3(scenarios[0], n_features=args.features, workers=args.workers)
        title = f"Γ estimates, Q = {scenarios[0].q}"

    path = write_frame(args.out / f"table{args.table}.tsv", frame)
    info_event(logger, "table_written", "Simulation table written", path=str(path))
    print(format_table(frame, title))
    return EXIT_OK
