"""CSV and JSON files exchanged by the command-line pipeline.

Every CSV starts with a ``# ztrec config_hash=<hex> seed=<n>`` line followed
by a header row. Ages in grid units are written as the shortest decimal that
round-trips the float, so reading a file back gives the same numbers.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .census import BIN_YEARS, CensusTable
from .errors import DomainError, SchemaError
from .model import AgeGrid, Cohort, CovariateSpace, SubjectRecord, jitter_ties

SUBJECT_COLUMNS = ("subject_id", "c_left_units", "c_right_units")
EVENT_COLUMNS = ("subject_id", "event_age_units")
CENSUS_COLUMNS = ("period",)


def fmt(x) -> str:
    """Shortest round-trip text for a number; integers stay integers."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if x == int(x) and abs(x) < 1e15:
        return str(int(x)) if not (x == 0 and math.copysign(1, x) < 0) else "0"
    return repr(x)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(settings: dict, inputs: Iterable = ()) -> str:
    """SHA-256 over the canonical settings and the contents of input files."""
    h = hashlib.sha256(canonical_json(settings).encode())
    for path in sorted(str(p) for p in inputs):
        h.update(Path(path).name.encode())
        h.update(sha256_file(path).encode())
    return h.hexdigest()


def _stamp(cfg_hash: str, seed) -> str:
    return f"# ztrec config_hash={cfg_hash} seed={seed}\n"


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], cfg_hash: str, seed) -> None:
    buf = io.StringIO()
    buf.write(_stamp(cfg_hash, seed))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_csv(path, required: Sequence[str]) -> tuple[list[str], list[dict]]:
    """Rows of a CSV as dicts; ``#`` lines are skipped and ``required`` columns checked."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"{path.name}: file not found")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    header = reader.fieldnames or []
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"{path.name}: missing column(s) {', '.join(missing)}")
    rows = []
    for k, row in enumerate(reader, start=2):
        if None in row or any(v is None for v in row.values()):
            raise SchemaError(f"{path.name} row {k}: wrong number of fields")
        row["_line"] = k
        rows.append(row)
    return header, rows


def _number(path, row, col, integer=False):
    try:
        v = float(row[col])
    except ValueError:
        raise SchemaError(f"{Path(path).name} row {row['_line']}, column {col}: "
                          f"not a number ({row[col]!r})") from None
    if not math.isfinite(v):
        raise SchemaError(f"{Path(path).name} row {row['_line']}, column {col}: not finite")
    if integer and v != int(v):
        raise SchemaError(f"{Path(path).name} row {row['_line']}, column {col}: not an integer")
    return v


def _z_columns(header) -> list[str]:
    return [c for c in header if c.startswith("z_")]


# ---------------------------------------------------------------------------
# dataset files

def write_dataset(out_dir, cohort: Cohort, census: CensusTable, cfg_hash: str, seed) -> list[Path]:
    out = Path(out_dir)
    zcols = [f"z_{n}" for n in cohort.space.names]
    paths = [out / "subjects.csv", out / "events.csv", out / "census.csv"]
    write_csv(paths[0], list(SUBJECT_COLUMNS) + zcols,
              ([r.id, r.c_left, r.c_right, *r.covariates] for r in cohort.records),
              cfg_hash, seed)
    write_csv(paths[1], EVENT_COLUMNS,
              ([r.id, a] for r in cohort.records for a in r.event_ages), cfg_hash, seed)
    bin_years = census.bin_years

    def census_rows():
        for li, period in enumerate(census.periods):
            for zi, cell in enumerate(census.space.cells):
                for y in range(census.n_bins):
                    yield [str(period), *cell, y * bin_years, census.counts[li, zi, y]]

    write_csv(paths[2], list(CENSUS_COLUMNS) + zcols + ["age_years", "count"], census_rows(),
              cfg_hash, seed)
    return paths


def read_census(path, resolution: str = "yearly", grid: AgeGrid | None = None) -> CensusTable:
    grid = grid or AgeGrid()
    if resolution not in BIN_YEARS:
        raise SchemaError(f"unknown census resolution {resolution!r}")
    header, rows = read_csv(path, list(CENSUS_COLUMNS) + ["age_years", "count"])
    zcols = _z_columns(header)
    if not zcols:
        raise SchemaError(f"{Path(path).name}: no covariate columns (z_<name>)")
    bin_years = BIN_YEARS[resolution]
    entries: dict = {}
    periods: list = []
    cells = set()
    for row in rows:
        z = tuple(_number(path, row, c) for c in zcols)
        age = _number(path, row, "age_years")
        count = _number(path, row, "count")
        if count < 0:
            raise SchemaError(f"{Path(path).name} row {row['_line']}: negative count")
        y = int(round(age / bin_years))
        if abs(y * bin_years - age) > 1e-6 * max(1.0, bin_years):
            raise SchemaError(f"{Path(path).name} row {row['_line']}: age_years {age} is not a "
                              f"{resolution} bin start")
        if row["period"] not in periods:
            periods.append(row["period"])
        cells.add(z)
        key = (row["period"], z, y)
        entries[key] = entries.get(key, 0.0) + count
    space = CovariateSpace([c[2:] for c in zcols], sorted(cells))
    try:
        return CensusTable.from_entries(entries, space, resolution, grid, periods)
    except DomainError as exc:
        raise SchemaError(f"{Path(path).name}: {exc}") from None


def read_cohort(subjects_path, events_path, space: CovariateSpace, grid: AgeGrid | None = None,
                jitter: bool = False) -> Cohort:
    """Cohort from subjects.csv and events.csv.

    Tied event ages within a subject are a schema error unless ``jitter`` is
    set, in which case ties are spread by a small fraction of a grid unit.
    """
    grid = grid or AgeGrid()
    header, srows = read_csv(subjects_path, SUBJECT_COLUMNS)
    zcols = _z_columns(header)
    if [c[2:] for c in zcols] != list(space.names):
        raise SchemaError(f"{Path(subjects_path).name}: covariate columns {zcols} do not match "
                          f"the census ({['z_' + n for n in space.names]})")
    _, erows = read_csv(events_path, EVENT_COLUMNS)
    events: dict[str, list[float]] = {}
    for row in erows:
        events.setdefault(row["subject_id"], []).append(
            _number(events_path, row, "event_age_units"))
    known = {row["subject_id"] for row in srows}
    stray = sorted(set(events) - known)
    if stray:
        raise SchemaError(f"{Path(events_path).name}: events for unknown subject {stray[0]!r}")
    records = []
    seen = set()
    for row in srows:
        sid = row["subject_id"]
        if sid in seen:
            raise SchemaError(f"{Path(subjects_path).name} row {row['_line']}: "
                              f"duplicate subject {sid!r}")
        seen.add(sid)
        ages = sorted(events.get(sid, []))
        if len(set(ages)) < len(ages):
            if not jitter:
                raise SchemaError(f"subject {sid!r}: tied event ages in "
                                  f"{Path(events_path).name} (use --jitter)")
            ages = jitter_ties(ages)
        z = tuple(_number(subjects_path, row, c) for c in zcols)
        try:
            space.index_of(z)
        except (DomainError, KeyError):
            raise SchemaError(f"{Path(subjects_path).name} row {row['_line']}: covariates {z} "
                              f"of subject {sid!r} not in the census covariate space") from None
        try:
            records.append(SubjectRecord(sid, _number(subjects_path, row, "c_left_units"),
                                         _number(subjects_path, row, "c_right_units"),
                                         tuple(ages), z))
        except DomainError as exc:
            raise SchemaError(f"subject {sid!r}: {exc}") from None
    try:
        return Cohort(records, space, grid)
    except DomainError as exc:
        raise SchemaError(str(exc)) from None


def read_dataset(data_dir, resolution: str = "yearly", grid: AgeGrid | None = None,
                 jitter: bool = False):
    d = Path(data_dir)
    census = read_census(d / "census.csv", resolution, grid)
    cohort = read_cohort(d / "subjects.csv", d / "events.csv", census.space, grid, jitter)
    return cohort, census


def dataset_files(data_dir) -> list[Path]:
    d = Path(data_dir)
    return [d / "subjects.csv", d / "events.csv", d / "census.csv"]
