"""Tests for study ingestion from TSV files."""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from batchmiss.config import BatchmissConfig
from batchmiss.ingest import (
    FLOAT_FORMAT,
    IngestError,
    StudyInput,
    _parse_numeric,
    apply_reference_filter,
    ingest,
    required_reference_batches,
    write_study,
)
from batchmiss.models import FeatureBatchData
from tests.conftest import reference_design

BATCH_MAP = """sample_id\tbatch_id\tchannel\tis_reference
s1\tA\t0\t1
s2\tA\t1\t0
s3\tA\t2\t0
s4\tB\t0\tyes
s5\tB\t1\tno
s6\tB\t2\tno
"""

ABUNDANCE = """feature_id\ts1\ts2\ts3\ts4\ts5\ts6
p1\t10.5\t11\t9.25\t10\t12\t8
p2\tNA\t11.5\t\tNA\tNA\tNA
"""

COVARIATES = """sample_id\tgroup
s1\t0
s2\t1
s3\t0
s4\t0
s5\t0
s6\t1
"""


def _write(tmp_path: Path, name: str, text: str) -> Path:
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def _study(
    tmp_path: Path,
    *,
    abundance: str = ABUNDANCE,
    batch_map: str = BATCH_MAP,
    covariates: str | None = COVARIATES,
    min_ref_obs_frac: float = 0.0,
) -> StudyInput:
    config = BatchmissConfig()
    config.run.min_ref_obs_frac = min_ref_obs_frac
    return StudyInput(
        abundance_path=_write(tmp_path, "abundance.tsv", abundance),
        batch_map_path=_write(tmp_path, "batch_map.tsv", batch_map),
        covariates_path=None if covariates is None else _write(tmp_path, "cov.tsv", covariates),
        config=config,
    )


def test_ingest_builds_features_and_designs(tmp_path: Path) -> None:
    data = ingest(_study(tmp_path))

    assert data.column_names == ("intercept", "reference", "group")
    assert data.batch_ids == ("A", "B")
    p1, p2 = data.features
    np.testing.assert_array_equal(p1.batches[0], [10.5, 11.0, 9.25])
    assert p2.feature_id == "p2"
    np.testing.assert_array_equal(p2.batch_missing, [False, True])
    np.testing.assert_array_equal(p2.sporadic_mask[0], [False, True, False])
    np.testing.assert_array_equal(data.designs[1].x, [[1, 1, 0], [1, 0, 0], [1, 0, 1]])
    assert data.designs[0].reference_channel == 0


def test_batch_map_rows_are_ordered_by_channel(tmp_path: Path) -> None:
    batch_map = """sample_id\tbatch_id\tchannel\tis_reference
s3\tA\t2\t0
s1\tA\t0\ttrue
s2\tA\t1\tfalse
s4\tB\t0\t1
s5\tB\t1\t0
s6\tB\t2\t0
"""
    data = ingest(_study(tmp_path, batch_map=batch_map))

    np.testing.assert_array_equal(data.features[0].batches[0], [10.5, 11.0, 9.25])


def test_without_covariates_or_reference(tmp_path: Path) -> None:
    batch_map = BATCH_MAP.replace("\t1\n", "\t0\n").replace("yes", "no")

    data = ingest(_study(tmp_path, batch_map=batch_map, covariates=None))

    assert data.column_names == ("intercept",)
    assert all(d.reference_channel is None for d in data.designs)


@pytest.mark.parametrize(
    ("field", "text", "match"),
    [
        ("abundance", ABUNDANCE.replace("s6", "s7"), r"abundance\.tsv:1 \[s7\]: unknown sample id"),
        ("abundance", ABUNDANCE.replace("12\t", "high\t"), r":2 \[s5\]: non-numeric value 'high'"),
        ("abundance", ABUNDANCE.replace("p2", "p1"), r":3 .*duplicate feature id 'p1'"),
        ("batch_map", BATCH_MAP.replace("s5\tB\t1\tno", "s5\tB\t1\t1"), "has 2 reference"),
        ("batch_map", BATCH_MAP.replace("s6\tB\t2", "s6\tB\t1"), "repeats channel 1"),
        ("batch_map", BATCH_MAP.replace("yes", "maybe"), r":5 \[is_reference\]: is_reference"),
        ("batch_map", BATCH_MAP.replace("s2\tA", "s1\tA"), r":3 \[sample_id\]: duplicate"),
        ("covariates", COVARIATES.replace("s6\t1", "s6\tNA"), r"cov\.tsv:7 \[group\]"),
        ("covariates", COVARIATES.replace("s6\t1\n", ""), "no covariates for samples"),
    ],
)
def test_ingest_errors_locate_the_problem(
    tmp_path: Path, field: str, text: str, match: str
) -> None:
    with pytest.raises(IngestError, match=match):
        ingest(_study(tmp_path, **{field: text}))


def test_missing_abundance_columns_are_rejected(tmp_path: Path) -> None:
    abundance = "feature_id\ts1\ts2\ts3\ts4\ts5\np1\t1\t2\t3\t4\t5\n"

    with pytest.raises(IngestError, match="without abundance columns"):
        ingest(_study(tmp_path, abundance=abundance))


def test_missing_file(tmp_path: Path) -> None:
    study = _study(tmp_path)
    study.abundance_path = tmp_path / "absent.tsv"

    with pytest.raises(FileNotFoundError, match="input file not found"):
        ingest(study)


def test_reference_filter_thresholds() -> None:
    assert required_reference_batches(0.7, 36) == 25
    assert required_reference_batches(0.7, 10) == 7
    assert required_reference_batches(0.0, 10) == 0

    designs = [reference_design()] * 36

    def feature(n_ref_observed: int, feature_id: str) -> FeatureBatchData:
        batches = [
            [10.0, 11.0, 12.0, 13.0] if i < n_ref_observed else [np.nan, 11.0, 12.0, 13.0]
            for i in range(36)
        ]
        return FeatureBatchData.from_values(batches, feature_id=feature_id)

    kept, excluded = apply_reference_filter(
        [feature(24, "low"), feature(25, "ok"), feature(36, "full")], designs, 0.7
    )

    assert [f.feature_id for f in kept] == ["ok", "full"]
    assert excluded == ["low"]


def test_filter_drops_features_without_observed_batches(tmp_path: Path) -> None:
    abundance = ABUNDANCE + "p3\tNA\tNA\tNA\tNA\tNA\tNA\n"

    data = ingest(_study(tmp_path, abundance=abundance))

    assert [f.feature_id for f in data.features] == ["p1", "p2"]
    assert data.excluded == ("p3",)


def test_default_filter_excludes_sparse_reference(tmp_path: Path) -> None:
    data = ingest(_study(tmp_path, min_ref_obs_frac=0.7))

    assert [f.feature_id for f in data.features] == ["p1"]
    assert data.excluded == ("p2",)


def test_written_study_ingests_losslessly(tmp_path: Path) -> None:
    config = BatchmissConfig()
    config.run.min_ref_obs_frac = 0.0
    samples = ["a0", "a1", "a2", "b0", "b1", "b2"]
    rng = np.random.default_rng(3)
    values = rng.normal(10.0, 2.0, size=(3, 2, 3))
    values[1, 1] = np.nan
    values[2, 0, 2] = np.nan
    features = [
        FeatureBatchData.from_values(list(v), feature_id=f"feat{j}") for j, v in enumerate(values)
    ]

    paths = write_study(
        tmp_path,
        features=features,
        sample_ids=[samples[:3], samples[3:]],
        batch_ids=["A", "B"],
        reference_channels=[0, 0],
        covariates={s: {"dose": float(i)} for i, s in enumerate(samples)},
    )
    data = ingest(
        StudyInput(
            abundance_path=paths["abundance"],
            batch_map_path=paths["batch_map"],
            covariates_path=paths["covariates"],
            config=config,
        )
    )

    assert data.column_names == ("intercept", "reference", "dose")
    for got, want in zip(data.features, features, strict=True):
        for x, y in zip(got.batches, want.batches, strict=True):
            np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(data.designs[1].x[:, 2], [3.0, 4.0, 5.0])


def test_numeric_cells_parse_to_the_exact_written_float(tmp_path: Path) -> None:
    values = np.random.default_rng(17).normal(10.0, 2.0, size=2000)
    frame = pd.DataFrame({"s1": [FLOAT_FORMAT % v for v in values] + ["NA", ""]})

    parsed = _parse_numeric(frame, ["s1"], tmp_path / "a.tsv", allow_missing=True)

    assert parsed[:2000, 0].tolist() == values.tolist()
    assert np.isnan(parsed[2000:, 0]).all()
