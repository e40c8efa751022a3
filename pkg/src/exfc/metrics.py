"""Incremental accuracies, task/domain averages and report export.

Accuracies are kept as integer ``(n_correct, n_total)`` pairs; the real
values are derived from them, so the averaging identities can be checked
exactly by recomputation.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyInputError


@dataclass(frozen=True)
class TaskAccuracy:
    domain_id: int
    task_id: int
    n_correct: int
    n_total: int

    def __post_init__(self):
        if self.n_total < 1 or not 0 <= self.n_correct <= self.n_total:
            raise ValueError(f"invalid counts {self.n_correct}/{self.n_total}")

    @property
    def a_t(self) -> float:
        return self.n_correct / self.n_total


def confusion_matrix(winners, truths, labels: Sequence[int]) -> list[list[int]]:
    """Rows are true classes, columns predicted, both ordered as ``labels``."""
    index = {c: i for i, c in enumerate(labels)}
    mat = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for w, t in zip(winners, truths):
        mat[index[int(t)], index[int(w)]] += 1
    return mat.tolist()


def accuracy(predictions: Iterable[tuple[int, int]], domain_id: int = 0, task_id: int = 0):
    """Exact accuracy of ``(winner, truth)`` pairs plus their confusion matrix."""
    pairs = [(int(w), int(t)) for w, t in predictions]
    if not pairs:
        raise EmptyInputError("no predictions to score")
    correct = sum(1 for w, t in pairs if w == t)
    labels = sorted({c for pair in pairs for c in pair})
    conf = confusion_matrix([w for w, _ in pairs], [t for _, t in pairs], labels)
    return TaskAccuracy(domain_id, task_id, correct, len(pairs)), labels, conf


def average_task(values: Sequence[float]) -> float:
    """Mean incremental accuracy over the tasks of one domain."""
    values = list(values)
    if not values:
        raise EmptyInputError("no task accuracies")
    return math.fsum(values) / len(values)


def average_domain(values: Sequence[float]) -> float:
    """Mean of the per-domain task averages."""
    values = list(values)
    if not values:
        raise EmptyInputError("no domain averages")
    return math.fsum(values) / len(values)


@dataclass
class EvalPoint:
    """Everything measured after training one task of one domain."""

    accuracy: TaskAccuracy
    labels: list[int]
    confusion: list[list[int]]
    # task id -> (n_correct, n_total) on that task's test items only
    per_task: dict[int, tuple[int, int]] = field(default_factory=dict)
    # other already-trained domains, evaluated on their own seen classes
    cross: dict[int, tuple[int, int]] = field(default_factory=dict)
    fused: tuple[int, int] | None = None
    ssl: dict | None = None

    @property
    def domain_id(self) -> int:
        return self.accuracy.domain_id

    @property
    def task_id(self) -> int:
        return self.accuracy.task_id

    @property
    def fused_a_t(self) -> float | None:
        return None if self.fused is None else self.fused[0] / self.fused[1]

    def to_dict(self) -> dict:
        return {
            "accuracy": asdict(self.accuracy),
            "a_t": self.accuracy.a_t,
            "labels": list(self.labels),
            "confusion": self.confusion,
            "per_task": {str(k): list(v) for k, v in sorted(self.per_task.items())},
            "cross": {str(k): list(v) for k, v in sorted(self.cross.items())},
            "fused": None if self.fused is None else list(self.fused),
            "ssl": self.ssl,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalPoint":
        return cls(
            TaskAccuracy(**d["accuracy"]),
            list(d["labels"]),
            [list(r) for r in d["confusion"]],
            {int(k): tuple(v) for k, v in d["per_task"].items()},
            {int(k): tuple(v) for k, v in d["cross"].items()},
            None if d["fused"] is None else tuple(d["fused"]),
            d["ssl"],
        )


@dataclass
class RunReport:
    points: list[EvalPoint]
    A_T: dict[int, float]
    A_D: float
    seed: int
    config: dict = field(default_factory=dict)

    @classmethod
    def build(cls, points: list[EvalPoint], seed: int, config: dict | None = None) -> "RunReport":
        points = sorted(points, key=lambda p: (p.domain_id, p.task_id))
        per_domain: dict[int, list[float]] = {}
        for p in points:
            per_domain.setdefault(p.domain_id, []).append(p.accuracy.a_t)
        a_t = {d: average_task(v) for d, v in per_domain.items()}
        return cls(points, a_t, average_domain(list(a_t.values())), seed, dict(config or {}))

    @property
    def task_accuracies(self) -> list[TaskAccuracy]:
        return [p.accuracy for p in self.points]

    def a_t(self, domain_id: int | None = None) -> list[float]:
        return [p.accuracy.a_t for p in self.points if domain_id in (None, p.domain_id)]

    def forgetting(self) -> list[dict]:
        """Final minus initial accuracy on each task's own test items."""
        rows = []
        for d in sorted(self.A_T):
            pts = [p for p in self.points if p.domain_id == d]
            last = pts[-1]
            for p in pts:
                t = p.task_id
                if t not in p.per_task or t not in last.per_task:
                    continue
                first = p.per_task[t][0] / p.per_task[t][1]
                final = last.per_task[t][0] / last.per_task[t][1]
                rows.append({"domain": d, "task": t, "initial": first, "final": final,
                             "delta": final - first})
        return rows

    def experience_series(self) -> list[dict]:
        """Per experience index: each domain's a_t and their mean.

        Both readings of a per-experience accuracy are exported: the
        domain-averaged value and the concatenated per-domain sequence.
        """
        by_task: dict[int, dict[int, float]] = {}
        for p in self.points:
            by_task.setdefault(p.task_id, {})[p.domain_id] = p.accuracy.a_t
        rows = []
        for t in sorted(by_task):
            vals = by_task[t]
            rows.append({"task": t, **{f"domain_{d}": v for d, v in sorted(vals.items())},
                         "mean": math.fsum(vals.values()) / len(vals)})
        return rows

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "A_T": {str(d): v for d, v in sorted(self.A_T.items())},
            "A_D": self.A_D,
            "points": [p.to_dict() for p in self.points],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(
            [EvalPoint.from_dict(p) for p in d["points"]],
            {int(k): v for k, v in d["A_T"].items()},
            d["A_D"],
            d["seed"],
            d["config"],
        )

    def __eq__(self, other):
        return isinstance(other, RunReport) and self.to_dict() == other.to_dict()


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha1(blob).hexdigest()[:10]


def report_stem(report: RunReport) -> str:
    return f"run_seed{report.seed}_{config_hash(report.config)}"


def _write_csv(path: Path, header: list[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def export_report(report: RunReport, directory, formats=("table", "structured")) -> list[Path]:
    """Write per-metric tables and/or the nested JSON document.

    File names embed the seed and a hash of the config echo.
    """
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    stem = report_stem(report)
    written = []
    try:
        if "table" in formats:
            p = out / f"{stem}_at.csv"
            _write_csv(
                p,
                ["domain", "task", "n_correct", "n_total", "a_t", "fused_correct",
                 "fused_total", "fused_a_t"],
                (
                    [pt.domain_id, pt.task_id, pt.accuracy.n_correct, pt.accuracy.n_total,
                     pt.accuracy.a_t]
                    + ([pt.fused[0], pt.fused[1], pt.fused_a_t] if pt.fused else ["", "", ""])
                    for pt in report.points
                ),
            )
            written.append(p)
            p = out / f"{stem}_domains.csv"
            _write_csv(p, ["domain", "tasks", "A_T"],
                       ([d, len(report.a_t(d)), v] for d, v in sorted(report.A_T.items())))
            written.append(p)
            p = out / f"{stem}_forgetting.csv"
            _write_csv(p, ["domain", "task", "initial", "final", "delta"],
                       ([r["domain"], r["task"], r["initial"], r["final"], r["delta"]]
                        for r in report.forgetting()))
            written.append(p)
            series = report.experience_series()
            cols = sorted({k for r in series for k in r if k.startswith("domain_")})
            p = out / f"{stem}_experience.csv"
            _write_csv(p, ["task", *cols, "mean"],
                       ([r["task"], *[r.get(c, "") for c in cols], r["mean"]] for r in series))
            written.append(p)
            p = out / f"{stem}_ssl.csv"
            _write_csv(
                p, ["domain", "task", "matched", "discarded", "mean_similarity", "correct", "scored"],
                ([pt.domain_id, pt.task_id, pt.ssl["matched"], pt.ssl["discarded"],
                  pt.ssl["mean_similarity"], pt.ssl["correct"], pt.ssl["scored"]]
                 for pt in report.points if pt.ssl),
            )
            written.append(p)
        if "structured" in formats:
            p = out / f"{stem}.json"
            p.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
            written.append(p)
    except OSError as exc:
        raise OSError(f"failed writing report under {out}: {exc}") from exc
    return written


def load_report(path) -> RunReport:
    return RunReport.from_dict(json.loads(Path(path).read_text()))


def aggregate(reports: Sequence[RunReport]) -> dict:
    """Mean and sample standard deviation of A_D and each A_T over runs."""
    if not reports:
        raise EmptyInputError("no reports to aggregate")

    def summary(vals):
        vals = list(vals)
        return {"mean": math.fsum(vals) / len(vals),
                "std": statistics.stdev(vals) if len(vals) > 1 else 0.0,
                "values": vals}

    domains = sorted(reports[0].A_T)
    return {
        "runs": len(reports),
        "seeds": [r.seed for r in reports],
        "A_D": summary(r.A_D for r in reports),
        "A_T": {str(d): summary(r.A_T[d] for r in reports) for d in domains},
    }
