"""Continual-learning metrics: accuracy matrix, average accuracy, forgetting, top-k, cost traces."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .errors import AggregateError, EmptyBatch, JobStateError, RangeError
from .nn import Batch, Params

DEFAULT_TOP_K = (1, 5)
CSV_COLUMNS = ("experience", "seconds", "patterns", "acc_top1", "acc_top5", "avg_acc", "forgetting_mean")


def eval_accuracy(params: Params, batch: Batch, k: int = 1, activation: str = "relu") -> float:
    """Fraction of samples whose label is among the top-``k`` predictions."""
    if len(batch) == 0:
        raise EmptyBatch("cannot evaluate on an empty batch")
    topk = nn.predict_topk(params, batch, k, activation)
    return topk_hits(topk, batch.labels, k) / len(batch)


def topk_hits(topk: np.ndarray, labels: np.ndarray, k: int) -> int:
    return int((topk[:, :k] == labels[:, None]).any(axis=1).sum())


@dataclass
class AccuracyMatrix:
    """``rows[i][j]``: accuracy on experience ``j``'s test split after training step ``i``."""

    rows: list[list[float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, i: int) -> list[float]:
        return self.rows[i]

    def append(self, row: Sequence[float]) -> None:
        row = [float(v) for v in row]
        if len(row) < len(self.rows) + 1:
            raise RangeError(f"row {len(self.rows)} needs at least {len(self.rows) + 1} entries")
        if any(not 0.0 <= v <= 1.0 for v in row):
            raise ValueError("accuracies must lie in [0, 1]")
        self.rows.append(row)

    def get(self, i: int, j: int) -> float:
        if not 0 <= i < len(self.rows) or not 0 <= j < len(self.rows[i]):
            raise RangeError(f"R[{i}][{j}] is not populated")
        return self.rows[i][j]

    def to_list(self) -> list[list[float]]:
        return [list(r) for r in self.rows]


def avg_accuracy(R: AccuracyMatrix, step: int) -> float:
    """Mean of R[step][j] over experiences already trained (j <= step)."""
    if not 0 <= step < len(R):
        raise RangeError(f"row {step} is not populated")
    return float(np.mean(R[step][: step + 1]))


def forgetting(R: AccuracyMatrix, j: int, T: int) -> float:
    """Best accuracy on ``j`` before step ``T`` minus its accuracy at ``T``."""
    if not 0 <= j < T:
        raise RangeError(f"forgetting needs j < T, got j={j}, T={T}")
    if T >= len(R):
        raise RangeError(f"row {T} is not populated")
    return max(R.get(l, j) for l in range(j, T)) - R.get(T, j)


def forgetting_mean(R: AccuracyMatrix, T: int) -> float:
    if T == 0:
        return 0.0
    return float(np.mean([forgetting(R, j, T) for j in range(T)]))


def bwt(R: AccuracyMatrix, T: int | None = None) -> float:
    """Backward transfer: mean of R[T][j] - R[j][j] over j < T."""
    T = len(R) - 1 if T is None else T
    if T >= len(R):
        raise RangeError(f"row {T} is not populated")
    if T == 0:
        return 0.0
    return float(np.mean([R.get(T, j) - R.get(j, j) for j in range(T)]))


@dataclass
class EfficiencyTrace:
    seconds: list[float] = field(default_factory=list)
    patterns: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.seconds)

    def append(self, seconds: float, patterns: int) -> None:
        if seconds < 0 or patterns < 0:
            raise ValueError("trace entries must be non-negative")
        self.seconds.append(float(seconds))
        self.patterns.append(int(patterns))


@dataclass
class PredictionEntry:
    step: int
    experience: int
    labels: np.ndarray
    topk: np.ndarray


@dataclass
class SeedRecord:
    """Everything measured for one seeded run over a stream."""

    seed: int
    protocol: str = "accumulating_test"
    top_k: tuple[int, ...] = DEFAULT_TOP_K
    matrices: dict[int, AccuracyMatrix] = field(default_factory=dict)
    stream_acc: dict[int, list[float]] = field(default_factory=dict)
    trace: EfficiencyTrace = field(default_factory=EfficiencyTrace)
    log: list[PredictionEntry] = field(default_factory=list)
    completed: bool = False

    def __post_init__(self):
        for k in self.top_k:
            self.matrices.setdefault(k, AccuracyMatrix())
            self.stream_acc.setdefault(k, [])

    @property
    def R(self) -> AccuracyMatrix:
        return self.matrices[min(self.top_k)]

    @property
    def steps(self) -> int:
        return len(self.trace)

    def summary_rows(self) -> list[dict]:
        """One dict per trained experience with the CSV export columns."""
        rows = []
        for i in range(self.steps):
            rows.append(
                {
                    "experience": i,
                    "seconds": self.trace.seconds[i],
                    "patterns": self.trace.patterns[i],
                    "acc_top1": self.stream_acc[_k_at(self.top_k, 1)][i],
                    "acc_top5": self.stream_acc[_k_at(self.top_k, 5)][i],
                    "avg_acc": avg_accuracy(self.R, i),
                    "forgetting_mean": forgetting_mean(self.R, i),
                }
            )
        return rows

    def to_dict(self, include_log: bool = False) -> dict:
        d = {
            "seed": self.seed,
            "protocol": self.protocol,
            "top_k": list(self.top_k),
            "accuracy_matrix": {str(k): m.to_list() for k, m in self.matrices.items()},
            "stream_accuracy": {str(k): list(v) for k, v in self.stream_acc.items()},
            "seconds": list(self.trace.seconds),
            "patterns": list(self.trace.patterns),
            "bwt": bwt(self.R) if self.steps else None,
            "rows": self.summary_rows(),
        }
        if include_log:
            d["prediction_log"] = [
                {"step": e.step, "experience": e.experience, "labels": e.labels.tolist(), "topk": e.topk.tolist()}
                for e in self.log
            ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SeedRecord":
        top_k = tuple(d["top_k"])
        rec = cls(seed=d["seed"], protocol=d["protocol"], top_k=top_k, completed=True)
        for k in top_k:
            rec.matrices[k] = AccuracyMatrix([list(r) for r in d["accuracy_matrix"][str(k)]])
            rec.stream_acc[k] = list(d["stream_accuracy"][str(k)])
        rec.trace = EfficiencyTrace(list(d["seconds"]), list(d["patterns"]))
        for e in d.get("prediction_log", []):
            rec.log.append(
                PredictionEntry(e["step"], e["experience"], np.asarray(e["labels"]), np.asarray(e["topk"]))
            )
        return rec


def _k_at(top_k: Sequence[int], wanted: int) -> int:
    """Largest configured k not above ``wanted`` (falls back to the smallest k)."""
    eligible = [k for k in top_k if k <= wanted]
    return max(eligible) if eligible else min(top_k)


def evaluate_step(
    record: SeedRecord,
    params: Params,
    tests: Sequence[Batch],
    step: int,
    activation: str = "relu",
) -> None:
    """Evaluate after training step ``step`` and append one row to every matrix.

    ``tests`` holds the test split of every experience known so far, in stream
    order. Under ``accumulating_test`` only experiences ``0..step`` enter the
    row and the stream accuracy; under ``full_test`` all of them do.
    """
    if step != len(record.R):
        raise RangeError(f"expected step {len(record.R)}, got {step}")
    last = step if record.protocol == "accumulating_test" else len(tests) - 1
    if last >= len(tests):
        raise RangeError(f"no test split for experience {last}")
    num_classes = params.weights[-1].shape[1]
    kmax = min(max(record.top_k), num_classes)
    hits = {k: [] for k in record.top_k}
    sizes = []
    for j in range(last + 1):
        batch = tests[j]
        if len(batch) == 0:
            raise EmptyBatch(f"experience {j} has an empty test split")
        topk = nn.predict_topk(params, batch, kmax, activation)
        record.log.append(PredictionEntry(step, j, batch.labels.copy(), topk))
        sizes.append(len(batch))
        for k in record.top_k:
            hits[k].append(topk_hits(topk, batch.labels, min(k, kmax)))
    total = sum(sizes)
    for k in record.top_k:
        record.matrices[k].append([h / n for h, n in zip(hits[k], sizes)])
        record.stream_acc[k].append(sum(hits[k]) / total)


def track(job) -> EfficiencyTrace:
    """Per-experience (seconds, patterns) of a finished run.

    Accepts anything with a ``completed`` flag and a ``trace``.
    """
    if not getattr(job, "completed", False):
        raise JobStateError("run has not completed")
    return job.trace


@dataclass
class RunRecord:
    seeds: list[int]
    records: list[SeedRecord]
    mean: dict
    std: dict

    def rows(self) -> list[dict]:
        return [
            {col: (i if col == "experience" else self.mean[col][i]) for col in CSV_COLUMNS}
            for i in range(len(self.mean["seconds"]))
        ]

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "runs": len(self.records),
            "per_seed": [r.to_dict() for r in self.records],
            "mean": self.mean,
            "std": self.std,
            "rows": self.rows(),
        }

    def to_csv(self) -> str:
        return rows_to_csv(self.rows(), CSV_COLUMNS)


def _series(rec: SeedRecord) -> dict[str, np.ndarray]:
    rows = rec.summary_rows()
    out = {col: np.array([r[col] for r in rows], dtype=np.float64) for col in CSV_COLUMNS if col != "experience"}
    for k, m in rec.matrices.items():
        width = max((len(r) for r in m.rows), default=0)
        padded = np.full((len(m), width), np.nan)
        for i, r in enumerate(m.rows):
            padded[i, : len(r)] = r
        out[f"R_top{k}"] = padded
    return out


def aggregate(records: Sequence[SeedRecord]) -> RunRecord:
    """Elementwise mean and sample standard deviation across seeded runs."""
    if not records:
        raise AggregateError("need at least one record")
    series = [_series(r) for r in records]
    keys = series[0].keys()
    for s in series[1:]:
        if s.keys() != keys or any(s[k].shape != series[0][k].shape for k in keys):
            raise AggregateError("records have different shapes")
    mean, std = {}, {}
    for key in keys:
        stack = np.stack([s[key] for s in series])
        m = stack.mean(axis=0)
        sd = stack.std(axis=0, ddof=1) if len(series) > 1 else np.zeros_like(m)
        mean[key] = _to_jsonable(m)
        std[key] = _to_jsonable(sd)
    return RunRecord([r.seed for r in records], list(records), mean, std)


def _to_jsonable(a: np.ndarray):
    if a.ndim == 0:
        return float(a)
    if a.ndim == 1:
        return [float(v) for v in a]
    return [[None if np.isnan(v) else float(v) for v in row] for row in a]


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: _fmt(row[c]) for c in columns})
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
