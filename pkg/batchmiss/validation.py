"""Consistency checks between a feature's data and the batch designs."""

from collections.abc import Sequence
from dataclasses import dataclass
from enum import StrEnum

from batchmiss.models import BatchDesign, FeatureBatchData


class Severity(StrEnum):
    FATAL = "fatal"
    WARNING = "warning"


@dataclass(frozen=True)
class Finding:
    severity: Severity
    code: str
    message: str
    batch: int | None = None


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...]
    q: int
    q_obs: int

    @property
    def accepted(self) -> bool:
        return not any(f.severity is Severity.FATAL for f in self.findings)

    @property
    def fatal(self) -> tuple[Finding, ...]:
        return tuple(f for f in self.findings if f.severity is Severity.FATAL)

    def raise_if_fatal(self, feature_id: str = "") -> None:
        if not self.accepted:
            raise DatasetError(self.fatal, feature_id=feature_id)


class DatasetError(ValueError):
    """Raised when a dataset has at least one fatal validation finding."""

    def __init__(self, findings: Sequence[Finding], feature_id: str = "") -> None:
        self.findings = tuple(findings)
        self.feature_id = feature_id
        prefix = f"feature {feature_id!r}: " if feature_id else ""
        super().__init__(prefix + "; ".join(f.message for f in self.findings))


def validate_dataset(data: FeatureBatchData, designs: Sequence[BatchDesign]) -> ValidationReport:
    """Collect per-batch findings; the dataset is accepted when none is fatal."""
    findings: list[Finding] = []

    if len(designs) != data.q:
        findings.append(
            Finding(
                Severity.FATAL,
                "batch_count_mismatch",
                f"data has {data.q} batches but {len(designs)} designs were given",
            )
        )
        return ValidationReport(tuple(findings), q=data.q, q_obs=data.q_obs)

    if data.q_obs == 0:
        findings.append(Finding(Severity.FATAL, "no_observed_batches", "no observed batches"))

    ks = {d.k for d in designs}
    hs = {d.h for d in designs}
    if len(ks) > 1:
        findings.append(
            Finding(Severity.FATAL, "column_mismatch", f"designs disagree on k: {sorted(ks)}")
        )
    if len(hs) > 1:
        findings.append(
            Finding(
                Severity.FATAL,
                "random_effect_mismatch",
                f"designs disagree on h: {sorted(hs)}",
            )
        )

    for i, (values, design) in enumerate(zip(data.batches, designs, strict=True)):
        if values.shape[0] != design.p:
            findings.append(
                Finding(
                    Severity.FATAL,
                    "dimension_mismatch",
                    f"batch {i} has {values.shape[0]} samples but its design has {design.p} rows",
                    batch=i,
                )
            )

    with_reference = sum(d.reference_channel is not None for d in designs)
    if 0 < with_reference < len(designs):
        findings.append(
            Finding(
                Severity.WARNING,
                "reference_conflict",
                f"only {with_reference} of {len(designs)} batches declare a reference channel",
            )
        )

    return ValidationReport(tuple(findings), q=data.q, q_obs=data.q_obs)
