"""Robustness report container and CSV/JSON emission."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

__all__ = ["ReportRow", "RobustnessReport", "emit_report", "load_report", "report_csv"]

CSV_COLUMNS = ("config", "variant", "split", "accuracy")


@dataclass(frozen=True)
class ReportRow:
    config: str
    variant: str
    split: str
    accuracy: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")


@dataclass
class RobustnessReport:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)  # config name -> failure message

    def add(self, config: str, variant: str, split: str, accuracy: float) -> None:
        key = (config, variant, split)
        if any((r.config, r.variant, r.split) == key for r in self.rows):
            raise ValueError(f"duplicate report row {key}")
        self.rows.append(ReportRow(config, variant, split, float(accuracy)))

    def accuracy(self, config: str, variant: str, split: str = "test") -> float:
        for r in self.rows:
            if (r.config, r.variant, r.split) == (config, variant, split):
                return r.accuracy
        raise KeyError((config, variant, split))

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "metadata": self.metadata, "errors": self.errors}

    @classmethod
    def from_dict(cls, d: dict) -> "RobustnessReport":
        return cls([ReportRow(**r) for r in d.get("rows", [])], dict(d.get("metadata", {})),
                   dict(d.get("errors", {})))


def report_csv(report: RobustnessReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.rows:
        w.writerow([r.config, r.variant, r.split, f"{r.accuracy:.4f}"])
    return buf.getvalue()


def emit_report(report: RobustnessReport, fmt: str, path) -> Path:
    """Write ``report`` as ``csv`` (rows only) or ``json`` (rows, metadata, errors)."""
    path = Path(path)
    if fmt == "csv":
        text = report_csv(report)
    elif fmt == "json":
        text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path.write_text(text, encoding="utf-8")
    return path


def load_report(path) -> RobustnessReport:
    return RobustnessReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
