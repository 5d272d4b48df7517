"""Reading and writing studies as tab-separated files.

Three files describe a study:

- abundance: one row per feature, first column the feature id, remaining columns
  keyed by sample id; "NA" or an empty cell marks a missing value.
- batch map: ``sample_id, batch_id, channel, is_reference``.
- covariates (optional): ``sample_id`` followed by numeric columns that become
  fixed effects after the intercept and the reference indicator.
"""

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from batchmiss.config import BatchmissConfig
from batchmiss.log import info_event
from batchmiss.models import BatchDesign, FeatureBatchData

logger = logging.getLogger("batchmiss.ingest")

MISSING_TOKENS = frozenset({"", "NA"})
BATCH_MAP_COLUMNS = ("sample_id", "batch_id", "channel", "is_reference")
_TRUE = frozenset({"1", "true", "yes"})
_FALSE = frozenset({"0", "false", "no"})
# Lossless float text for round trips
FLOAT_FORMAT = "%.17g"


class IngestError(ValueError):
    """A parse or consistency error located in an input file."""

    def __init__(
        self,
        message: str,
        path: str | Path,
        row: int | None = None,
        column: str | None = None,
    ) -> None:
        self.path = str(path)
        self.row = row
        self.column = column
        where = self.path
        if row is not None:
            where += f":{row}"
        if column is not None:
            where += f" [{column}]"
        super().__init__(f"{where}: {message}")


@dataclass
class StudyInput:
    abundance_path: Path
    batch_map_path: Path
    covariates_path: Path | None = None
    config: BatchmissConfig = field(default_factory=BatchmissConfig)


@dataclass(frozen=True, eq=False)
class StudyData:
    """Features sharing one batch layout, ready to be fitted."""

    features: tuple[FeatureBatchData, ...]
    designs: tuple[BatchDesign, ...]
    column_names: tuple[str, ...]
    # Feature ids removed by the reference-observation filter
    excluded: tuple[str, ...] = ()
    batch_ids: tuple[str, ...] = ()


def _read_table(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    try:
        return pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise IngestError(f"cannot parse table: {exc}", path) from exc


def _file_row(index: int) -> int:
    # Header is line 1
    return index + 2


def _require_columns(frame: pd.DataFrame, columns: Sequence[str], path: Path) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise IngestError(f"missing required columns {missing}", path, row=1)


def _to_float(token: str) -> float:
    # float() is correctly rounded; pd.to_numeric can be off by one ulp
    try:
        return float(token)
    except ValueError:
        return math.nan


def _parse_numeric(
    frame: pd.DataFrame, columns: Sequence[str], path: Path, *, allow_missing: bool
) -> np.ndarray:
    """Convert columns to floats; missing tokens become NaN when allowed."""
    out = np.empty((len(frame), len(columns)))
    for j, column in enumerate(columns):
        text = frame[column].str.strip()
        is_missing = text.isin(MISSING_TOKENS).to_numpy()
        values = np.array([_to_float(t) for t in text.where(~is_missing, "nan")], dtype=float)
        bad = (np.isnan(values) & ~is_missing) | np.isinf(values)
        if not allow_missing:
            bad |= is_missing
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise IngestError(
                f"non-numeric value {frame[column].iloc[i]!r}", path, _file_row(i), column
            )
        values[is_missing] = np.nan
        out[:, j] = values
    return out


def _parse_flag(value: str, path: Path, row: int) -> bool:
    token = value.strip().lower()
    if token in _TRUE:
        return True
    if token in _FALSE:
        return False
    raise IngestError(
        f"is_reference must be 0/1 or true/false, got {value!r}", path, row, "is_reference"
    )


@dataclass(frozen=True)
class _BatchLayout:
    batch_ids: tuple[str, ...]
    # Sample ids of each batch in channel order
    samples: tuple[tuple[str, ...], ...]
    reference: tuple[int | None, ...]


def _read_batch_map(path: Path) -> _BatchLayout:
    frame = _read_table(path)
    _require_columns(frame, BATCH_MAP_COLUMNS, path)

    seen: set[str] = set()
    batches: dict[str, list[tuple[int, str, bool, int]]] = {}
    for i, row in enumerate(frame.itertuples(index=False)):
        line = _file_row(i)
        sample = str(row.sample_id).strip()
        if not sample:
            raise IngestError("empty sample_id", path, line, "sample_id")
        if sample in seen:
            raise IngestError(f"duplicate sample_id {sample!r}", path, line, "sample_id")
        seen.add(sample)
        try:
            channel = int(str(row.channel).strip())
        except ValueError as exc:
            raise IngestError(
                f"channel must be an integer, got {row.channel!r}", path, line, "channel"
            ) from exc
        is_ref = _parse_flag(str(row.is_reference), path, line)
        batches.setdefault(str(row.batch_id).strip(), []).append((channel, sample, is_ref, line))

    samples = []
    reference: list[int | None] = []
    for batch_id, members in batches.items():
        members.sort()
        for prev, cur in zip(members, members[1:], strict=False):
            if prev[0] == cur[0]:
                raise IngestError(
                    f"batch {batch_id!r} repeats channel {cur[0]}", path, cur[3], "channel"
                )
        refs = [pos for pos, m in enumerate(members) if m[2]]
        if len(refs) > 1:
            raise IngestError(
                f"batch {batch_id!r} has {len(refs)} reference channels",
                path,
                members[refs[1]][3],
                "is_reference",
            )
        samples.append(tuple(m[1] for m in members))
        reference.append(refs[0] if refs else None)
    return _BatchLayout(
        batch_ids=tuple(batches), samples=tuple(samples), reference=tuple(reference)
    )


def _read_covariates(path: Path, layout: _BatchLayout) -> tuple[list[str], dict[str, np.ndarray]]:
    frame = _read_table(path)
    _require_columns(frame, ["sample_id"], path)
    columns = [c for c in frame.columns if c != "sample_id"]
    values = _parse_numeric(frame, columns, path, allow_missing=False)

    known = {s for batch in layout.samples for s in batch}
    rows: dict[str, np.ndarray] = {}
    for i, sample in enumerate(frame["sample_id"].str.strip()):
        if sample not in known:
            raise IngestError(f"unknown sample_id {sample!r}", path, _file_row(i), "sample_id")
        if sample in rows:
            raise IngestError(f"duplicate sample_id {sample!r}", path, _file_row(i), "sample_id")
        rows[sample] = values[i]
    absent = sorted(known - rows.keys())
    if absent:
        raise IngestError(f"no covariates for samples {absent[:5]}", path)
    return columns, rows


def _build_designs(
    layout: _BatchLayout, covariate_names: Sequence[str], covariates: Mapping[str, np.ndarray]
) -> tuple[tuple[BatchDesign, ...], tuple[str, ...]]:
    with_reference = any(r is not None for r in layout.reference)
    names = ["intercept", *(["reference"] if with_reference else []), *covariate_names]
    designs = []
    for members, ref in zip(layout.samples, layout.reference, strict=True):
        x = np.zeros((len(members), len(names)))
        x[:, 0] = 1.0
        offset = 1
        if with_reference:
            if ref is not None:
                x[ref, 1] = 1.0
            offset = 2
        for j, sample in enumerate(members):
            if covariate_names:
                x[j, offset:] = covariates[sample]
        designs.append(BatchDesign(x=x, z=np.ones((len(members), 1)), reference_channel=ref))
    return tuple(designs), tuple(names)


def required_reference_batches(frac: float, n_reference_batches: int) -> int:
    """Smallest observed-reference count that passes the filter (half rounds up)."""
    return int(math.floor(frac * n_reference_batches + 0.5))


def apply_reference_filter(
    features: Sequence[FeatureBatchData], designs: Sequence[BatchDesign], min_frac: float
) -> tuple[list[FeatureBatchData], list[str]]:
    """Keep features whose reference channel is observed in enough batches.

    Features with no observed batch are always dropped. When no batch carries
    a reference channel only that rule applies.
    """
    ref_batches = [
        (i, d.reference_channel) for i, d in enumerate(designs) if d.reference_channel is not None
    ]
    required = required_reference_batches(min_frac, len(ref_batches))
    kept: list[FeatureBatchData] = []
    excluded: list[str] = []
    for data in features:
        observed = sum(bool(data.sporadic_mask[i][ref]) for i, ref in ref_batches)
        if data.q_obs == 0 or (ref_batches and observed < required):
            excluded.append(data.feature_id)
        else:
            kept.append(data)
    return kept, excluded


def ingest(study: StudyInput) -> StudyData:
    """Build per-feature data and the shared batch designs from the study files."""
    layout = _read_batch_map(Path(study.batch_map_path))
    if study.covariates_path is not None:
        names, covariates = _read_covariates(Path(study.covariates_path), layout)
    else:
        names, covariates = [], {}
    designs, column_names = _build_designs(layout, names, covariates)

    path = Path(study.abundance_path)
    frame = _read_table(path)
    if frame.shape[1] < 2:
        raise IngestError("abundance table needs a feature column and sample columns", path, 1)
    id_column = frame.columns[0]
    sample_columns = [str(c) for c in frame.columns[1:]]
    known = {s: (b, j) for b, batch in enumerate(layout.samples) for j, s in enumerate(batch)}
    for column in sample_columns:
        if column not in known:
            raise IngestError(f"unknown sample id {column!r}", path, 1, column)
    absent = sorted(set(known) - set(sample_columns))
    if absent:
        raise IngestError(f"batch-map samples without abundance columns: {absent[:5]}", path, 1)

    values = _parse_numeric(frame, sample_columns, path, allow_missing=True)
    position = [sample_columns.index(s) for batch in layout.samples for s in batch]
    bounds = np.cumsum([0, *(len(batch) for batch in layout.samples)])

    features = []
    seen: set[str] = set()
    for i, feature_id in enumerate(frame[id_column].str.strip()):
        if feature_id in seen:
            raise IngestError(f"duplicate feature id {feature_id!r}", path, _file_row(i), id_column)
        seen.add(feature_id)
        row = values[i, position]
        batches = [row[bounds[b] : bounds[b + 1]] for b in range(len(layout.samples))]
        features.append(FeatureBatchData.from_values(batches, feature_id=feature_id))

    kept, excluded = apply_reference_filter(features, designs, study.config.run.min_ref_obs_frac)
    info_event(
        logger,
        "ingest_done",
        "Study ingested",
        features=len(features),
        retained=len(kept),
        excluded=len(excluded),
        batches=len(designs),
        samples=len(known),
    )
    return StudyData(
        features=tuple(kept),
        designs=designs,
        column_names=column_names,
        excluded=tuple(excluded),
        batch_ids=layout.batch_ids,
    )


def write_study(
    directory: str | Path,
    *,
    features: Sequence[FeatureBatchData],
    sample_ids: Sequence[Sequence[str]],
    batch_ids: Sequence[str],
    reference_channels: Sequence[int | None],
    covariates: Mapping[str, Mapping[str, float]] | None = None,
) -> dict[str, Path]:
    """Write abundance, batch-map and (optionally) covariate TSV files."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    flat_ids = [s for batch in sample_ids for s in batch]

    abundance = pd.DataFrame(
        [np.concatenate(f.batches) for f in features],
        columns=flat_ids,
    )
    abundance.insert(0, "feature_id", [f.feature_id for f in features])
    paths = {"abundance": out / "abundance.tsv", "batch_map": out / "batch_map.tsv"}
    abundance.to_csv(
        paths["abundance"], sep="\t", index=False, na_rep="NA", float_format=FLOAT_FORMAT
    )

    batch_map = pd.DataFrame(
        [
            {
                "sample_id": sample,
                "batch_id": batch_id,
                "channel": j,
                "is_reference": int(ref == j),
            }
            for batch_id, batch, ref in zip(batch_ids, sample_ids, reference_channels, strict=True)
            for j, sample in enumerate(batch)
        ],
        columns=list(BATCH_MAP_COLUMNS),
    )
    batch_map.to_csv(paths["batch_map"], sep="\t", index=False)

    if covariates is not None:
        names = sorted({k for row in covariates.values() for k in row})
        frame = pd.DataFrame(
            [{"sample_id": s, **{k: covariates[s][k] for k in names}} for s in flat_ids],
            columns=["sample_id", *names],
        )
        paths["covariates"] = out / "covariates.tsv"
        frame.to_csv(paths["covariates"], sep="\t", index=False, float_format=FLOAT_FORMAT)
    return paths
