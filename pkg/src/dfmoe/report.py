"""Run reports: named checks, metric tables, config echo and run metadata.

Everything except ``meta`` (timestamp, wall-clock) is a pure function of
config and seed; ``fingerprint()`` hashes exactly that part.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any

COMPARATORS = ("le", "gt")


@dataclass
class Check:
    """A measured value compared against a threshold.

    ``le`` passes when ``value <= threshold``; ``gt`` when ``value > threshold``
    (used by guards that expect a nonzero gap).  NaN never passes.
    """
    name: str
    value: float
    threshold: float
    comparator: str = "le"
    hard: bool = True
    detail: str = ""

    def __post_init__(self) -> None:
        if self.comparator not in COMPARATORS:
            raise ValueError(f"unknown comparator {self.comparator!r}")
        self.value = float(self.value)
        self.threshold = float(self.threshold)

    @property
    def passed(self) -> bool:
        if math.isnan(self.value):
            return False
        if self.comparator == "le":
            return self.value <= self.threshold
        return self.value > self.threshold


@dataclass
class MetricTable:
    name: str
    columns: list[str]
    rows: list[list[Any]] = field(default_factory=list)

    def add_row(self, *values: Any) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"table {self.name}: {len(values)} values for {len(self.columns)} columns")
        self.rows.append(list(values))

    def column(self, name: str) -> list[Any]:
        idx = self.columns.index(name)
        return [row[idx] for row in self.rows]


@dataclass
class RunReport:
    kind: str
    seed: int
    config: dict
    checks: list[Check] = field(default_factory=list)
    tables: list[MetricTable] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add_check(self, check: Check) -> Check:
        if any(c.name == check.name for c in self.checks):
            raise ValueError(f"duplicate check {check.name!r}")
        self.checks.append(check)
        return check

    def check(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def add_table(self, table: MetricTable) -> MetricTable:
        if any(t.name == table.name for t in self.tables):
            raise ValueError(f"duplicate table {table.name!r}")
        self.tables.append(table)
        return table

    def table(self, name: str) -> MetricTable:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.hard)

    def failing(self) -> list[Check]:
        return [c for c in self.checks if c.hard and not c.passed]

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "config": self.config,
            "passed": self.passed,
            "checks": [asdict(c) | {"passed": c.passed} for c in self.checks],
            "tables": [asdict(t) for t in self.tables],
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, data: dict) -> RunReport:
        checks = [
            Check(**{k: v for k, v in c.items() if k != "passed"})
            for c in data.get("checks", [])
        ]
        tables = [MetricTable(t["name"], list(t["columns"]), [list(r) for r in t["rows"]]) for t in data.get("tables", [])]
        return cls(
            kind=data["kind"],
            seed=int(data["seed"]),
            config=data.get("config", {}),
            checks=checks,
            tables=tables,
            meta=data.get("meta", {}),
        )

    def fingerprint(self) -> str:
        """SHA-256 of the report without ``meta``."""
        body = self.to_dict()
        body.pop("meta")
        text = json.dumps(body, sort_keys=True, allow_nan=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()
