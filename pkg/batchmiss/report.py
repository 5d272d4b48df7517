"""Serialization of study results, diagnostics and simulation tables."""

import json
import math
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from batchmiss.mechanism import BadmmDiagnostic

NA = "NA"


def format_float(value: float | None) -> str:
    """Shortest text that round-trips the float; NA for missing values."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return NA
    return repr(float(value))


def format_p(value: float | None) -> str:
    if value is None or math.isnan(value):
        return NA
    return f"{value:.16e}"


def _cell(value: Any) -> str:
    if isinstance(value, bool | np.bool_):
        return "true" if value else "false"
    if isinstance(value, int | np.integer):
        return str(int(value))
    if isinstance(value, float | np.floating):
        return format_float(float(value))
    if value is None:
        return NA
    return str(value)


def write_rows(
    path: str | Path,
    rows: Iterable[Mapping[str, Any]],
    columns: Sequence[str],
) -> Path:
    """Write mappings as a TSV in a fixed column order. Strings pass through unchanged."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [[_cell(row.get(c)) for c in columns] for row in rows],
        columns=list(columns),
        dtype=str,
    )
    frame.to_csv(path, sep="\t", index=False, lineterminator="\n")
    return path


def write_frame(path: str | Path, frame: pd.DataFrame) -> Path:
    """Write a results table with round-trip float formatting."""
    return write_rows(path, frame.to_dict(orient="records"), [str(c) for c in frame.columns])


def write_diagnostic(directory: Path, diagnostic: BadmmDiagnostic) -> dict[str, Path]:
    rows = [
        {"feature_id": r.feature_id, "t_j": r.t, "pi_j": r.pi, "fitted_pi": r.fitted_pi}
        for r in diagnostic.rows
    ]
    bins = [
        {"pi_j": b.pi, "median_t_j": b.median_t, "n_features": b.n_features}
        for b in diagnostic.bins
    ]
    return {
        "diagnostic": write_rows(
            directory / "diagnostic.tsv", rows, ["feature_id", "t_j", "pi_j", "fitted_pi"]
        ),
        "diagnostic_bins": write_rows(
            directory / "diagnostic_bins.tsv", bins, ["pi_j", "median_t_j", "n_features"]
        ),
    }


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _finite_or_none(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, Mapping):
        return {k: _finite_or_none(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_finite_or_none(v) for v in value]
    return value


def write_summary(path: str | Path, summary: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(
        _finite_or_none(dict(summary)),
        indent=2,
        sort_keys=True,
        ensure_ascii=False,
        default=_json_default,
    )
    path.write_text(text + "\n", encoding="utf-8")
    return path
