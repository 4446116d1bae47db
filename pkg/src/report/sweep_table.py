"""Sweep results as JSON and CSV.

One row per completed grid point, in grid order. Both formats carry the
columns below in this order; the JSON document also carries the schema tag.
CSV floats are written with 17 significant digits so doubles survive a
round trip; empty cells stand for missing values.
"""

import io
import json
import math
from dataclasses import dataclass, field

import pandas as pd

SCHEMA_VERSION = "hepex-sweep/1"
COLUMNS = [
    "strategy",
    "prune",
    "fraction",
    "tile",
    "n",
    "seed",
    "loss",
    "zero_tile_pct",
    "add",
    "mul",
    "rot",
    "relin",
    "allocated_tiles",
    "memory_bytes",
    "latency_ms",
    "memory_reduction",
    "latency_reduction",
]
TEXT_COLUMNS = ("strategy", "prune", "tile")
INT_COLUMNS = ("n", "seed", "add", "mul", "rot", "relin", "allocated_tiles", "memory_bytes")


@dataclass
class SweepTable:
    rows: list = field(default_factory=list)
    schema: str = SCHEMA_VERSION

    def append(self, row):
        unknown = set(row) - set(COLUMNS)
        if unknown:
            raise ValueError(f"Unknown sweep columns: {sorted(unknown)}")
        self.rows.append({col: row.get(col) for col in COLUMNS})

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=COLUMNS)

    def __len__(self):
        return len(self.rows)


def _check_not_empty(table):
    if not table.rows:
        raise ValueError("empty sweep")


def _to_cell(value):
    # JSON has no NaN or infinity; a diverged grid point is written as null
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def emit_json(table):
    """Serialises the table as UTF-8 JSON bytes with a stable key order."""
    _check_not_empty(table)
    rows = [[_to_cell(row[c]) for c in COLUMNS] for row in table.rows]
    document = {"schema": table.schema, "columns": COLUMNS, "rows": rows}
    return json.dumps(document, indent=1, allow_nan=False).encode("utf-8")


def parse_json(data):
    document = json.loads(data.decode("utf-8") if isinstance(data, bytes) else data)
    if document.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"Unsupported sweep schema {document.get('schema')!r}, expected {SCHEMA_VERSION}")
    if document.get("columns") != COLUMNS:
        raise ValueError("Sweep columns do not match this version's header")
    return SweepTable([dict(zip(COLUMNS, values)) for values in document["rows"]])


def emit_csv(table):
    """Serialises the table as RFC-4180 CSV bytes (CRLF line ends, quoted when needed)."""
    _check_not_empty(table)
    buffer = io.StringIO()
    table.to_frame().to_csv(buffer, index=False, float_format="%.17g", lineterminator="\r\n")
    return buffer.getvalue().encode("utf-8")


def _from_cell(column, value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    if column in TEXT_COLUMNS:
        return str(value)
    if column in INT_COLUMNS:
        return int(value)
    return float(value)


def parse_csv(data):
    frame = pd.read_csv(
        io.BytesIO(data),
        dtype={c: str for c in TEXT_COLUMNS},
        float_precision="round_trip",
        keep_default_na=False,
        na_values=[""],
    )
    if list(frame.columns) != COLUMNS:
        raise ValueError(f"CSV header {list(frame.columns)} does not match {COLUMNS}")
    rows = [
        {col: _from_cell(col, value) for col, value in zip(COLUMNS, record)}
        for record in frame.itertuples(index=False, name=None)
    ]
    return SweepTable(rows)
