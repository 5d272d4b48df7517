"""Configuration loading from TOML file for batchmiss."""

import tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

_MECHANISM_FORMS = ("exponential", "logit")
_GAMMA_SOURCES = ("fixed", "estimated", "profiled")
_INIT_POLICIES = ("available-case", "unit")


@dataclass(frozen=True)
class FitConfig:
    """ECM iteration control."""

    # Hard cap on ECM iterations; a fit that hits it reports converged=False
    max_iter: int = 500
    # Relative parameter change below which the fit is declared converged
    tol: float = 1e-8
    # Record the observed-data log-likelihood after every iteration
    monitor_likelihood: bool = True
    # Starting-value policy: "available-case" or "unit"
    init: str = "available-case"

    def __post_init__(self) -> None:
        if self.max_iter < 1:
            raise ValueError("[fit].max_iter must be at least 1")
        if not self.tol > 0:
            raise ValueError("[fit].tol must be greater than 0")
        if self.init not in _INIT_POLICIES:
            raise ValueError(f"[fit].init must be one of {_INIT_POLICIES}, got {self.init!r}")


@dataclass
class MechanismConfig:
    """Batch-level missing-data mechanism settings."""

    # "exponential" or "logit"
    form: str = "exponential"
    # Intercept and abundance coefficient used when source = "fixed"
    gamma0: float = 0.0
    gamma: float = 0.1
    # Where Γ comes from: "fixed", "estimated" (available-case fit) or "profiled"
    source: str = "fixed"
    # Grid of γ values "g0:g1:step" scanned when source = "profiled"
    profile_grid: str | None = None


@dataclass
class InferenceConfig:
    """Permutation inference settings."""

    # Number of batch permutations per feature; 0 skips permutation p-values
    permutations: int = 999
    # Master seed; per-feature seeds are derived from it and the feature id
    seed: int = 20151
    # Covariate names to test; empty means every column except intercept and reference
    tested: list[str] = field(default_factory=list)


@dataclass
class RunConfig:
    """Study-level orchestration settings."""

    # Worker processes used to fit features concurrently
    threads: int = 1
    # A feature is kept when its reference channel is observed in at least this fraction
    # of the batches carrying a reference channel
    min_ref_obs_frac: float = 0.7
    # Directory receiving results.tsv, diagnostic.tsv, errors.tsv and summary.json
    out_dir: str = "results"


@dataclass
class LoggingConfig:
    """Logging configuration."""

    # Console log level (file handler always captures DEBUG)
    level: str = "INFO"
    # Directory for log files; None disables the file handler
    dir: str | None = "data/logs"
    # Number of days to keep rotated log files
    keep_days: int = 30
    # Total log size cap in MB; oldest files are deleted when exceeded
    max_total_mb: int = 100


@dataclass
class BatchmissConfig:
    """Top-level batchmiss configuration, aggregating all sub-configs."""

    mechanism: MechanismConfig = field(default_factory=MechanismConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    run: RunConfig = field(default_factory=RunConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)


def parse_grid(text: str) -> list[float]:
    """Expand a "start:stop:step" string into an inclusive list of grid values."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"profile grid must look like 'g0:g1:step', got {text!r}")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError as exc:
        raise ValueError(f"profile grid has a non-numeric bound: {text!r}") from exc
    if step <= 0 or stop < start:
        raise ValueError(f"profile grid needs step > 0 and g1 >= g0, got {text!r}")
    count = int(round((stop - start) / step)) + 1
    return [start + i * step for i in range(count)]


def validate_config(config: BatchmissConfig) -> BatchmissConfig:
    """Check cross-field constraints; raise ValueError naming the offending key."""
    mech = config.mechanism
    if mech.form not in _MECHANISM_FORMS:
        raise ValueError(f"[mechanism].form must be one of {_MECHANISM_FORMS}, got {mech.form!r}")
    if mech.source not in _GAMMA_SOURCES:
        raise ValueError(
            f"[mechanism].source must be one of {_GAMMA_SOURCES}, got {mech.source!r}"
        )
    if mech.source == "profiled":
        if not mech.profile_grid:
            raise ValueError("[mechanism].profile_grid is required when source = 'profiled'")
        parse_grid(mech.profile_grid)
    if config.inference.permutations < 0:
        raise ValueError("[inference].permutations must be >= 0")
    if config.run.threads < 1:
        raise ValueError("[run].threads must be at least 1")
    if not 0.0 <= config.run.min_ref_obs_frac <= 1.0:
        raise ValueError("[run].min_ref_obs_frac must lie in [0, 1]")
    return config


def _section(raw: dict[str, Any], name: str) -> dict[str, Any]:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ValueError(f"[{name}] must be a table")
    return dict(value)


def _build(cls: type, name: str, values: dict[str, Any]) -> Any:
    try:
        return cls(**values)
    except TypeError as exc:
        raise ValueError(f"[{name}] has an unknown key: {exc}") from exc


def load_config(path: str | Path | None = None) -> BatchmissConfig:
    """
    Load configuration from a TOML file.

    Falls back to defaults for any missing fields; ``None`` returns pure defaults.
    Raises FileNotFoundError if the file does not exist.
    """
    if path is None:
        return validate_config(BatchmissConfig())

    config_path = Path(path)
    if not config_path.exists():
        raise FileNotFoundError(f"Configuration file not found: {config_path}")

    with open(config_path, "rb") as f:
        raw = tomllib.load(f)

    return validate_config(
        BatchmissConfig(
            mechanism=_build(MechanismConfig, "mechanism", _section(raw, "mechanism")),
            fit=_build(FitConfig, "fit", _section(raw, "fit")),
            inference=_build(InferenceConfig, "inference", _section(raw, "inference")),
            run=_build(RunConfig, "run", _section(raw, "run")),
            logging=_build(LoggingConfig, "logging", _section(raw, "logging")),
        )
    )
