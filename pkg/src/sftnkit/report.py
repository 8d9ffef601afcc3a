"""Run reports, fixed-column CSV tables and standard-vs-student-aware comparisons.

CSV columns
-----------
``RUN_COLUMNS``         one row per (run, seed) plus ``mean`` / ``std`` aggregate rows
``SWEEP_COLUMNS``       one row per (axis value, seed); ``status`` is ``ok`` or ``aborted``
``COMPARISON_COLUMNS``  one row per paired (method, student, dataset, seed); ``delta`` is
                        ``sftn_student_acc - standard_student_acc`` and blank when unpaired

Floats are written with ``repr`` so a table re-parses to bit-identical values.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .config import canonical_hash

SCHEMA_VERSION = 1

RUN_COLUMNS = ("seed", "teacher_mode", "method", "teacher_arch", "student_arch", "teacher_acc", "student_acc",
               "mean_kl", "cka", "top1_agreement", "teacher_entropy", "student_entropy", "teacher_hash",
               "student_hash")
SWEEP_COLUMNS = ("axis", "value", "seed", "teacher_acc", "student_acc", "status")
COMPARISON_COLUMNS = ("method", "student_arch", "dataset", "seed", "arm", "standard_student_acc",
                      "sftn_student_acc", "delta", "standard_kl", "sftn_kl", "standard_cka", "sftn_cka")
METRIC_COLUMNS = ("teacher_acc", "student_acc", "mean_kl", "cka", "top1_agreement", "teacher_entropy",
                  "student_entropy")

# timing never enters a report hash, everything else does
_VOLATILE = {"wall_time_s", "epoch_wall_time_s"}


@dataclass
class SeedResult:
    seed: int
    teacher_acc: float
    teacher_hash: str
    teacher_history: list[dict] = field(default_factory=list)
    student_acc: Optional[float] = None
    student_hash: Optional[str] = None
    student_history: list[dict] = field(default_factory=list)
    similarity: Optional[dict] = None
    wall_time_s: float = 0.0


@dataclass
class RunReport:
    kind: str  # "teacher" or "distill"
    config: dict
    config_hash: str
    dataset_hash: str
    results: list[SeedResult] = field(default_factory=list)
    aborted: list[dict] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    @property
    def teacher_mode(self) -> str:
        return self.config["teacher_mode"]

    @property
    def method(self) -> str:
        return self.config["distill"]["method"]

    def aggregate(self) -> dict:
        """Mean and sample standard deviation of every metric across seeds."""
        out = {}
        for col in METRIC_COLUMNS:
            vals = [r[col] for r in self.rows() if r.get(col) not in (None, "")]
            if vals:
                out[col] = {"mean": float(np.mean(vals)),
                            "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0, "n": len(vals)}
        return out

    def rows(self) -> list[dict]:
        rows = []
        for r in self.results:
            sim = r.similarity or {}
            rows.append({
                "seed": r.seed, "teacher_mode": self.teacher_mode,
                "method": self.method if self.kind == "distill" else "",
                "teacher_arch": self.config["teacher_arch"], "student_arch": self.config["student_arch"],
                "teacher_acc": r.teacher_acc, "student_acc": r.student_acc,
                "mean_kl": sim.get("mean_kl"), "cka": sim.get("cka"), "top1_agreement": sim.get("top1_agreement"),
                "teacher_entropy": sim.get("teacher_entropy"), "student_entropy": sim.get("student_entropy"),
                "teacher_hash": r.teacher_hash, "student_hash": r.student_hash,
            })
        return rows

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "kind": self.kind, "config": self.config,
                "config_hash": self.config_hash, "dataset_hash": self.dataset_hash,
                "results": [asdict(r) for r in self.results], "aggregate": self.aggregate(),
                "aborted": self.aborted}

    def hash(self) -> str:
        return canonical_hash(_strip_volatile(self.to_dict()))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        d = self.to_dict()
        d["report_hash"] = self.hash()
        path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema_version {d.get('schema_version')!r}")
        return cls(kind=d["kind"], config=d["config"], config_hash=d["config_hash"],
                   dataset_hash=d["dataset_hash"], results=[SeedResult(**r) for r in d["results"]],
                   aborted=d.get("aborted", []))

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _strip_volatile(obj):
    if isinstance(obj, dict):
        return {k: _strip_volatile(v) for k, v in obj.items() if k not in _VOLATILE}
    if isinstance(obj, list):
        return [_strip_volatile(v) for v in obj]
    return obj


def hash_json_file(path) -> str:
    return canonical_hash(_strip_volatile(json.loads(Path(path).read_text())))


# -- CSV ------------------------------------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(rows: Iterable[dict], columns: Iterable[str], path=None) -> str:
    columns = list(columns)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        unknown = set(row) - set(columns)
        if unknown:
            raise ValueError(f"row has columns outside the table layout: {sorted(unknown)}")
        w.writerow([_cell(row.get(c)) for c in columns])
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


def _parse_cell(s: str):
    if s == "":
        return None
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def read_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    return [{k: _parse_cell(v) for k, v in row.items()} for row in reader]


def run_table(report: RunReport) -> list[dict]:
    """Per-seed rows followed by ``mean`` and ``std`` rows."""
    rows = report.rows()
    agg = report.aggregate()
    for stat in ("mean", "std"):
        rows.append({"seed": stat, "teacher_mode": report.teacher_mode,
                     "method": rows[0]["method"] if rows else "",
                     "teacher_arch": report.config["teacher_arch"], "student_arch": report.config["student_arch"],
                     **{c: agg[c][stat] for c in agg}})
    return rows


# -- comparisons --------------------------------------------------------------------------------

@dataclass
class Comparison:
    rows: list[dict]
    unpaired: list[dict]
    similarity: list[dict]

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "rows": self.rows, "unpaired": self.unpaired,
                "similarity": self.similarity}


def compare_reports(reports: list[RunReport]) -> Comparison:
    """Pair standard-teacher and student-aware-teacher distillation runs.

    Runs pair when they share dataset hash, student architecture, distillation
    method and seed.  Each student-aware arm (``sftn``, ``sftn-ft``) is compared
    with the standard arm; a lone arm is emitted with a blank delta.
    """
    by_key: dict[tuple, dict[str, dict]] = {}
    for rep in reports:
        if rep.kind != "distill":
            continue
        for row in rep.rows():
            key = (rep.method, row["student_arch"], rep.dataset_hash, row["seed"])
            by_key.setdefault(key, {})[rep.teacher_mode] = row
    rows, unpaired, similarity = [], [], []
    for key in sorted(by_key, key=lambda k: tuple(str(x) for x in k)):
        arms = by_key[key]
        method, student, dataset, seed = key
        std = arms.get("standard")
        aware = [m for m in ("sftn", "sftn-ft") if m in arms]
        if std is None or not aware:
            unpaired.append({"method": method, "student_arch": student, "dataset": dataset, "seed": seed,
                             "present": sorted(arms)})
        for arm in aware or [None]:
            other = arms.get(arm) if arm else None
            row = {"method": method, "student_arch": student, "dataset": dataset, "seed": seed,
                   "arm": arm or "standard",
                   "standard_student_acc": std["student_acc"] if std else None,
                   "sftn_student_acc": other["student_acc"] if other else None,
                   "standard_kl": std["mean_kl"] if std else None, "sftn_kl": other["mean_kl"] if other else None,
                   "standard_cka": std["cka"] if std else None, "sftn_cka": other["cka"] if other else None}
            row["delta"] = (other["student_acc"] - std["student_acc"]) if (std and other) else None
            rows.append(row)
        for mode, r in sorted(arms.items()):
            similarity.append({"method": method, "student_arch": student, "seed": seed, "teacher_mode": mode,
                               **{c: r[c] for c in ("mean_kl", "cka", "top1_agreement", "teacher_entropy",
                                                    "student_entropy")}})
    return Comparison(rows, unpaired, similarity)
