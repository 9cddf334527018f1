"""Result persistence: atomic writes, feature matrices, assignments, reports.

Every file is written to a temp file in the destination directory and then
renamed over the target, so a crashed run never leaves a half-written
artifact behind.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

if TYPE_CHECKING:
    from dfmoe.report import RunReport

# Binary feature matrix: magic, uint64 n, uint64 dim, then little-endian float64 rows
_MATRIX_MAGIC = b"DFMX"
_MATRIX_HEADER = struct.Struct("<4sQQ")

REPORT_FILENAME = "report.json"
CHECKS_FILENAME = "checks.csv"
FORMATS = ("json", "csv", "all")


def atomic_write_bytes(path: Path, data: bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    return path


def atomic_write_text(path: Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Feature matrices and ids
# ---------------------------------------------------------------------------

def write_matrix(path: str | Path, matrix: np.ndarray) -> Path:
    """Text (header ``n dim``) or, for a ``.bin`` suffix, the binary layout."""
    path = Path(path)
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    n, dim = matrix.shape
    if path.suffix == ".bin":
        body = matrix.astype("<f8").tobytes()
        return atomic_write_bytes(path, _MATRIX_HEADER.pack(_MATRIX_MAGIC, n, dim) + body)
    buf = io.StringIO()
    buf.write(f"{n} {dim}\n")
    for row in matrix:
        buf.write(" ".join(repr(float(v)) for v in row) + "\n")
    return atomic_write_text(path, buf.getvalue())


def read_matrix(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".bin":
        raw = path.read_bytes()
        if len(raw) < _MATRIX_HEADER.size:
            raise ValueError(f"{path}: truncated matrix header")
        magic, n, dim = _MATRIX_HEADER.unpack_from(raw)
        if magic != _MATRIX_MAGIC:
            raise ValueError(f"{path}: bad matrix magic {magic!r}")
        body = np.frombuffer(raw, dtype="<f8", offset=_MATRIX_HEADER.size)
        if body.size != n * dim:
            raise ValueError(f"{path}: expected {n * dim} values, found {body.size}")
        return body.reshape(n, dim).astype(float)
    lines = path.read_text(encoding="utf-8").split("\n")
    try:
        n, dim = (int(v) for v in lines[0].split())
    except ValueError as e:
        raise ValueError(f"{path}: bad matrix header {lines[0]!r}") from e
    rows = [line.split() for line in lines[1:] if line.strip()]
    if len(rows) != n or any(len(r) != dim for r in rows):
        raise ValueError(f"{path}: matrix body does not match header {n}x{dim}")
    return np.array([[float(v) for v in r] for r in rows], dtype=float).reshape(n, dim)


def write_ids(path: str | Path, ids: Sequence[str]) -> Path:
    return atomic_write_text(Path(path), "".join(f"{i}\n" for i in ids))


def read_ids(path: str | Path) -> list[str]:
    return [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line]


def write_assignments(path: str | Path, assignment: Mapping[str, int]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["item_id", "cluster_id"])
    for item_id, cluster in assignment.items():
        writer.writerow([item_id, cluster])
    return atomic_write_text(Path(path), buf.getvalue())


def read_assignments(path: str | Path) -> dict[str, int]:
    with open(path, encoding="utf-8", newline="") as f:
        return {row["item_id"]: int(row["cluster_id"]) for row in csv.DictReader(f)}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _csv_text(columns: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    return buf.getvalue()


def emit_report(report: RunReport, out_dir: str | Path, fmt: str = "all") -> list[Path]:
    """Write the report as JSON and/or one CSV per table plus ``checks.csv``."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    out_dir = Path(out_dir)
    written: list[Path] = []
    if fmt in ("json", "all"):
        text = json.dumps(report.to_dict(), indent=2, sort_keys=True, allow_nan=True)
        written.append(atomic_write_text(out_dir / REPORT_FILENAME, text + "\n"))
    if fmt in ("csv", "all"):
        check_rows = [
            [c.name, c.value, c.threshold, c.comparator, c.hard, c.passed, c.detail]
            for c in report.checks
        ]
        written.append(atomic_write_text(
            out_dir / CHECKS_FILENAME,
            _csv_text(["name", "value", "threshold", "comparator", "hard", "passed", "detail"], check_rows),
        ))
        for table in report.tables:
            written.append(atomic_write_text(
                out_dir / f"{table.name}.csv", _csv_text(table.columns, table.rows),
            ))
    return written


def load_report(path: str | Path) -> RunReport:
    from dfmoe.report import RunReport

    path = Path(path)
    if path.is_dir():
        path = path / REPORT_FILENAME
    return RunReport.from_dict(json.loads(path.read_text(encoding="utf-8")))
