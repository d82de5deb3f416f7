from __future__ import annotations

import csv
import io
from typing import Any, Dict, List, Mapping

import numpy as np

from .models import MalformedCsvError


METRICS_COLUMNS = [
    "iter",
    "mean_return",
    "mean_hitting_time",
    "z_hat",
    "effective_lr",
    "grad_norm",
    "censor_rate",
    "wall_time_s",
]

OCCUPANCY_COLUMNS = [
    "row",
    "col",
    "x_low",
    "x_high",
    "y_low",
    "y_high",
    "count",
    "normalized",
]

SWEEP_COLUMNS = [
    "lr",
    "repeat",
    "seed",
    "status",
    "iterations",
    "final_neg_return",
    "final_hitting_time",
    "error",
]

REQUIRED_COLUMNS_BY_TYPE: Mapping[str, List[str]] = {
    "METRICS": METRICS_COLUMNS,
    "OCCUPANCY": OCCUPANCY_COLUMNS,
}

INT_COLUMNS = {"iter", "row", "col", "count"}


# -------------------------
# CSV parsing
# -------------------------

def _strip_row(row: Dict[str, Any]) -> Dict[str, Any]:
    return {k: (v.strip() if isinstance(v, str) else v) for k, v in row.items()}


def _require_header(fieldnames: List[str], required: List[str]) -> None:
    """
    Validate that the CSV header carries the frozen column names, in order.

    Raises:
        MalformedCsvError: If the header differs from `required`.
    """
    if list(fieldnames) != required:
        missing = [c for c in required if c not in fieldnames]
        raise MalformedCsvError(
            f"CSV header must be {','.join(required)}; missing columns: {missing}", 1)


def _parse_numbers(row: Dict[str, Any], cols: List[str], line_no: int) -> Dict[str, Any]:
    """
    Convert every required column of a row into int or float.

    Raises:
        MalformedCsvError: If a value is empty or not a number.
    """
    parsed: Dict[str, Any] = {}
    for c in cols:
        v = row.get(c)
        if v is None or (isinstance(v, str) and not v):
            raise MalformedCsvError(f"'{c}' is required.", line_no)
        try:
            parsed[c] = int(v) if c in INT_COLUMNS else float(v)
        except ValueError:
            raise MalformedCsvError(f"'{c}' is not a number: {v!r}.", line_no)
    return parsed


def parse_csv_bytes(csv_bytes: bytes, csv_content_type: str) -> List[Dict[str, Any]]:
    """
    Parse a metrics or occupancy CSV into numeric rows.

    Args:
        csv_bytes:
            Raw file content. UTF-8 with or without BOM is supported.

        csv_content_type:
            'METRICS' or 'OCCUPANCY'; selects the frozen header.

    Returns:
        One dict per data row with int/float values.

    Raises:
        MalformedCsvError:
            - If the content type is invalid
            - If the header differs from the frozen schema
            - If a value is missing or not numeric (names the row)
            - If the CSV contains no data rows
    """
    try:
        required = REQUIRED_COLUMNS_BY_TYPE[csv_content_type]
    except KeyError:
        raise MalformedCsvError(
            "Invalid content type was provided. Use: METRICS or OCCUPANCY.")

    text = csv_bytes.decode("utf-8-sig")
    reader = csv.DictReader(io.StringIO(text))

    fieldnames = reader.fieldnames
    if not fieldnames:
        raise MalformedCsvError("CSV appears to have no header row.")
    _require_header(fieldnames, required)

    rows: List[Dict[str, Any]] = []
    for line_no, raw in enumerate(reader, start=2):
        if None in raw:
            raise MalformedCsvError("too many fields.", line_no)
        rows.append(_parse_numbers(_strip_row(raw), required, line_no))

    if not rows:
        raise MalformedCsvError("CSV contains a header but no data rows.")

    return rows


def format_number(value: float) -> str:
    """Shortest round-trip text for a float, so CSV output is byte-stable."""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


# -------------------------
# Seeds
# -------------------------

def trajectory_streams(master_seed: int, iteration: int, k: int) -> List[np.random.Generator]:
    """
    Independent generators for the K trajectories of one iteration.

    Stream k is keyed by (master_seed, iteration, k), so it does not depend on
    how many other trajectories are simulated or in which order.
    """
    return [np.random.default_rng(np.random.SeedSequence([master_seed, iteration, idx]))
            for idx in range(k)]


def iteration_rng(master_seed: int, iteration: int) -> np.random.Generator:
    """Generator for per-iteration choices (experience subsampling)."""
    return np.random.default_rng(np.random.SeedSequence([master_seed, iteration, 2**32 - 1]))


def init_rng(master_seed: int) -> np.random.Generator:
    """Generator for parameter initialization."""
    return np.random.default_rng(np.random.SeedSequence([master_seed, 2**32 - 2]))


def derived_seed(master_seed: int, *keys: int) -> int:
    """Seed for a derived run (sweep cell, repeat), stable across processes."""
    return int(np.random.SeedSequence([master_seed, *keys]).generate_state(1)[0])


# -------------------------
# Smoothing
# -------------------------

def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average; the first entries average over what is available."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return values
    window = max(1, min(window, values.size))
    csum = np.cumsum(np.insert(values, 0, 0.0))
    out = np.empty_like(values)
    idx = np.arange(values.size)
    lo = np.maximum(0, idx - window + 1)
    out[:] = (csum[idx + 1] - csum[lo]) / (idx + 1 - lo)
    return out

