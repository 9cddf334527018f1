"""Tests for dfmoe.persist: atomic writes, feature matrices, assignments and reports."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from dfmoe.persist import (
    atomic_write_text,
    emit_report,
    load_report,
    read_assignments,
    read_ids,
    read_matrix,
    write_assignments,
    write_ids,
    write_matrix,
)
from dfmoe.report import Check, MetricTable, RunReport


def _report() -> RunReport:
    report = RunReport(kind="experiment", seed=2, config={"seed": 2})
    report.add_check(Check("experiment.item_balance", 1, 1, detail="max - min"))
    table = report.add_table(MetricTable("metrics", ["model", "log_loss"]))
    table.add_row("dense", 0.7)
    table.add_row("routed", math.inf)
    report.add_table(MetricTable("empty", ["a", "b"]))
    return report


# ---------------------------------------------------------------------------
# Atomic writes
# ---------------------------------------------------------------------------

class TestAtomicWrite:

    def test_creates_parent_dirs(self, tmp_path: Path):
        path = atomic_write_text(tmp_path / "a" / "b" / "x.txt", "hello")
        assert path.read_text() == "hello"

    def test_replaces_existing(self, tmp_path: Path):
        atomic_write_text(tmp_path / "x.txt", "one")
        atomic_write_text(tmp_path / "x.txt", "two")
        assert (tmp_path / "x.txt").read_text() == "two"
        assert not list(tmp_path.glob("*.tmp"))

    def test_utf8_encoding(self, tmp_path: Path):
        atomic_write_text(tmp_path / "u.txt", "≤ ✓")
        assert (tmp_path / "u.txt").read_text(encoding="utf-8") == "≤ ✓"


# ---------------------------------------------------------------------------
# Matrices, ids, assignments
# ---------------------------------------------------------------------------

class TestMatrix:

    @pytest.mark.parametrize("suffix", [".txt", ".bin"])
    def test_exact_values_survive(self, tmp_path: Path, suffix):
        m = np.random.default_rng(0).standard_normal((5, 3))
        np.testing.assert_array_equal(read_matrix(write_matrix(tmp_path / f"f{suffix}", m)), m)

    def test_text_header(self, tmp_path: Path):
        write_matrix(tmp_path / "f.txt", [[0.6, 0.8]])
        assert (tmp_path / "f.txt").read_text().splitlines()[0] == "1 2"

    def test_text_body_mismatch(self, tmp_path: Path):
        (tmp_path / "f.txt").write_text("2 2\n1 0\n")
        with pytest.raises(ValueError, match="does not match"):
            read_matrix(tmp_path / "f.txt")

    def test_bad_binary_magic(self, tmp_path: Path):
        (tmp_path / "f.bin").write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(ValueError, match="magic"):
            read_matrix(tmp_path / "f.bin")

    def test_truncated_binary(self, tmp_path: Path):
        path = write_matrix(tmp_path / "f.bin", np.eye(3))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="expected 9 values"):
            read_matrix(path)


def test_ids_one_per_line(tmp_path: Path):
    write_ids(tmp_path / "ids", ["item-00001", "item-00002"])
    assert read_ids(tmp_path / "ids") == ["item-00001", "item-00002"]


def test_assignments_csv(tmp_path: Path):
    write_assignments(tmp_path / "a.csv", {"x": 1, "y": 0})
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "item_id,cluster_id"
    assert read_assignments(tmp_path / "a.csv") == {"x": 1, "y": 0}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

class TestEmitReport:

    def test_all_formats(self, tmp_path: Path):
        names = sorted(p.name for p in emit_report(_report(), tmp_path, "all"))
        assert names == ["checks.csv", "empty.csv", "metrics.csv", "report.json"]

    def test_json_only(self, tmp_path: Path):
        paths = emit_report(_report(), tmp_path, "json")
        assert [p.name for p in paths] == ["report.json"]
        data = json.loads(paths[0].read_text())
        assert data["passed"] is True
        assert data["checks"][0]["passed"] is True

    def test_empty_table_is_header_only(self, tmp_path: Path):
        emit_report(_report(), tmp_path, "csv")
        assert (tmp_path / "empty.csv").read_text() == "a,b\n"

    def test_checks_csv_columns(self, tmp_path: Path):
        emit_report(_report(), tmp_path, "csv")
        with open(tmp_path / "checks.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert rows[0]["name"] == "experiment.item_balance"
        assert rows[0]["passed"] == "True"

    def test_unknown_format(self, tmp_path: Path):
        with pytest.raises(ValueError):
            emit_report(_report(), tmp_path, "xml")

    def test_load_from_directory(self, tmp_path: Path):
        report = _report()
        emit_report(report, tmp_path, "json")
        loaded = load_report(tmp_path)
        assert loaded.fingerprint() == report.fingerprint()
        assert math.isinf(loaded.table("metrics").column("log_loss")[1])
