"""Experiment reports.

JSON schema (``REPORT_FORMAT``)::

    {"format": ..., "seed": int, "config": {key: value},
     "metrics": {name: float in [0, 1]},
     "counts": {name: int},
     "entropy": {model: EntropyReport fields},
     "diagnostics": {name: [float, ...]},
     "timings": {stage: seconds}}

Metric names are ``<purifier>.<quantity>``, e.g. ``backdoor.asr`` or
``benign.certified.trigger@0.25``.  The flat CSV has columns
``section,name,value`` in the order the JSON lists them.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..defenses import EntropyReport

REPORT_FORMAT = "difflab-report/1"
CSV_HEADER = ("section", "name", "value")
SWEEP_COLUMNS = ("parameter", "value", "metric", "result")


def _finite(name, v) -> float:
    v = float(v)
    if not math.isfinite(v):
        raise ValueError(f"{name} is not finite")
    return v


@dataclass
class ExperimentReport:
    seed: int
    config: dict
    metrics: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    entropy: dict[str, EntropyReport] = field(default_factory=dict)
    diagnostics: dict[str, list[float]] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for k, v in self.metrics.items():
            v = _finite(k, v)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"metric {k}={v} outside [0, 1]")
        for k, vs in self.diagnostics.items():
            for v in vs:
                _finite(k, v)
        for k, v in self.timings.items():
            if _finite(k, v) < 0:
                raise ValueError(f"negative timing {k}")
        for k, v in self.counts.items():
            if int(v) != v or v < 0:
                raise ValueError(f"count {k} must be a nonnegative integer")

    def merge(self, other: "ExperimentReport") -> "ExperimentReport":
        self.metrics.update(other.metrics)
        self.counts.update(other.counts)
        self.entropy.update(other.entropy)
        self.diagnostics.update(other.diagnostics)
        self.timings.update(other.timings)
        self.validate()
        return self

    def results(self) -> dict:
        """Everything except wall-clock timings; the determinism contract
        covers exactly this."""
        return {"metrics": dict(self.metrics), "counts": dict(self.counts),
                "entropy": {k: json.loads(v.to_json()) for k, v in self.entropy.items()},
                "diagnostics": {k: list(v) for k, v in self.diagnostics.items()}}

    def to_dict(self) -> dict:
        return {"format": REPORT_FORMAT, "seed": int(self.seed), "config": self.config,
                **self.results(), "timings": dict(self.timings)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=False)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentReport":
        if doc.get("format") != REPORT_FORMAT:
            raise ValueError("not a difflab report")
        return cls(doc["seed"], doc["config"], doc["metrics"], doc["counts"],
                   {k: EntropyReport(**v) for k, v in doc["entropy"].items()},
                   doc["diagnostics"], doc["timings"])

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        return cls.from_dict(json.loads(text))

    def csv_rows(self) -> list[tuple[str, str, float]]:
        rows = [("metrics", k, v) for k, v in self.metrics.items()]
        rows += [("counts", k, v) for k, v in self.counts.items()]
        for k, rep in self.entropy.items():
            rows.append(("entropy", f"{k}.mean", rep.mean))
            rows += [("entropy", f"{k}.trial{i}", e) for i, e in enumerate(rep.entropies)]
        for k, vs in self.diagnostics.items():
            rows += [("diagnostics", f"{k}[{i}]", v) for i, v in enumerate(vs)]
        rows += [("timings", k, v) for k, v in self.timings.items()]
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for section, name, value in self.csv_rows():
            w.writerow([section, name, repr(value) if isinstance(value, float) else value])
        return buf.getvalue()

    def write(self, out_dir, stem: str = "report") -> Path:
        """Write ``<stem>.json`` and ``<stem>.csv``; return the JSON path."""
        path = Path(out_dir) / f"{stem}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        path.with_suffix(".csv").write_text(self.to_csv())
        return path


def load_report(path) -> ExperimentReport:
    return ExperimentReport.from_json(Path(path).read_text())


def sweep_series(parameter: str, values, reports) -> list[tuple[str, float, str, float]]:
    """Long-format rows, one per (value, metric)."""
    rows = []
    for value, rep in zip(values, reports):
        for name, result in rep.metrics.items():
            rows.append((parameter, float(value), name, float(result)))
    return rows


def write_sweep_csv(path, parameter: str, values, reports) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for p, v, name, result in sweep_series(parameter, values, reports):
            w.writerow([p, repr(v), name, repr(result)])
    return path
