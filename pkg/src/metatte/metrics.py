"""Travel-time error metrics, overall, per task and bucketed by time or distance."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import ParameterStore
from .errors import DegenerateInputError, DimensionError
from .model import make_batch, predict
from .trajectory import MetaTrajectory, Scaler


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction length {pred.size} differs from label length {truth.size}")
    if pred.size == 0:
        raise DegenerateInputError("metrics need at least one record")
    return pred, truth


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def mape(pred, truth) -> float:
    """Mean absolute percentage error, in percent."""
    pred, truth = _pair(pred, truth)
    if (truth <= 0).any():
        raise ValueError("MAPE requires strictly positive labels")
    return float(100.0 * np.mean(np.abs(pred - truth) / truth))


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


@dataclass(frozen=True)
class MetricsReport:
    scope: str
    n: int
    mae: float | None = None
    mape: float | None = None
    rmse: float | None = None

    @classmethod
    def compute(cls, scope: str, pred, truth) -> "MetricsReport":
        pred = np.asarray(pred, dtype=np.float64)
        if pred.size == 0:
            return cls(scope, 0)
        return cls(scope, int(pred.size), mae(pred, truth), mape(pred, truth), rmse(pred, truth))


@dataclass(frozen=True)
class Record:
    task_id: str
    label: float
    prediction: float
    distance_km: float


@dataclass(frozen=True)
class BucketSpec:
    dimension: str  # "travel_time" or "travel_distance"
    edges: tuple[float, ...]

    def __post_init__(self):
        if self.dimension not in ("travel_time", "travel_distance"):
            raise ValueError(f"unknown bucket dimension {self.dimension!r}")
        edges = tuple(float(e) for e in self.edges)
        if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError(f"bucket edges must be strictly increasing, got {self.edges}")
        object.__setattr__(self, "edges", edges)

    @classmethod
    def regular(cls, dimension: str, low: float, high: float, step: float) -> "BucketSpec":
        n = math.ceil((high - low) / step - 1e-9)
        return cls(dimension, tuple(low + i * step for i in range(max(n, 1) + 1)))

    def value(self, rec: Record) -> float:
        return rec.label if self.dimension == "travel_time" else rec.distance_km

    def index(self, value: float) -> int | None:
        """Half-open bucket index, or None for the overflow bucket."""
        if not self.edges[0] <= value < self.edges[-1]:
            return None
        return int(np.searchsorted(self.edges, value, side="right")) - 1

    def labels(self) -> list[str]:
        unit = "s" if self.dimension == "travel_time" else "km"
        return [f"{self.dimension}[{a:g},{b:g}){unit}" for a, b in zip(self.edges, self.edges[1:])]


def bucketize(records: Sequence[Record], spec: BucketSpec) -> list[MetricsReport]:
    """One report per bucket plus a trailing overflow bucket for out-of-range records."""
    n_buckets = len(spec.edges) - 1
    groups: list[list[Record]] = [[] for _ in range(n_buckets + 1)]
    for rec in records:
        i = spec.index(spec.value(rec))
        groups[n_buckets if i is None else i].append(rec)
    names = spec.labels() + [f"{spec.dimension}[overflow]"]
    return [
        MetricsReport.compute(name, [r.prediction for r in group], [r.label for r in group])
        for name, group in zip(names, groups)
    ]


# ---------------------------------------------------------------------------
# model evaluation


def predict_seconds(
    store: ParameterStore,
    model_config,
    pool: Sequence[MetaTrajectory],
    scalers: Mapping[str, Scaler],
    chunk: int = 256,
) -> np.ndarray:
    """De-normalized predictions for a mixed-task pool, in pool order."""
    out = np.empty(len(pool))
    by_task: dict[str, list[int]] = {}
    for i, traj in enumerate(pool):
        by_task.setdefault(traj.task_id, []).append(i)
    for task_id, idx in by_task.items():
        scaler = scalers[task_id]
        for lo in range(0, len(idx), chunk):
            part = idx[lo : lo + chunk]
            batch = make_batch([pool[i] for i in part], scaler, task_id)
            out[part] = scaler.denormalize_label(predict(store, batch, model_config))
    return out


def records_for(pool: Sequence[MetaTrajectory], predictions: Iterable[float]) -> list[Record]:
    return [Record(t.task_id, t.label, float(p), t.distance_km) for t, p in zip(pool, predictions)]


def report_set(records: Sequence[Record], buckets: Sequence[BucketSpec] = ()) -> list[MetricsReport]:
    """Overall, then one row per task (first-seen order), then every bucket row."""
    if not records:
        raise DegenerateInputError("cannot evaluate an empty pool")
    reports = [MetricsReport.compute("overall", [r.prediction for r in records], [r.label for r in records])]
    tasks: dict[str, list[Record]] = {}
    for r in records:
        tasks.setdefault(r.task_id, []).append(r)
    for task_id, recs in tasks.items():
        reports.append(
            MetricsReport.compute(f"task:{task_id}", [r.prediction for r in recs], [r.label for r in recs])
        )
    for spec in buckets:
        reports.extend(bucketize(records, spec))
    return reports


def evaluate(
    store: ParameterStore,
    model_config,
    pool: Sequence[MetaTrajectory],
    scalers: Mapping[str, Scaler],
    buckets: Sequence[BucketSpec] = (),
) -> list[MetricsReport]:
    if not pool:
        raise DegenerateInputError("cannot evaluate an empty pool")
    return report_set(records_for(pool, predict_seconds(store, model_config, pool, scalers)), buckets)


def default_buckets(thresholds: Iterable, which: str = "both") -> list[BucketSpec]:
    """Travel time every 120 s and distance every 1 km across the configured ranges."""
    thresholds = list(thresholds)
    out = []
    if which in ("time", "both"):
        out.append(BucketSpec.regular(
            "travel_time", min(t.min_time for t in thresholds), max(t.max_time for t in thresholds), 120.0))
    if which in ("distance", "both"):
        out.append(BucketSpec.regular(
            "travel_distance", min(t.min_dist for t in thresholds), max(t.max_dist for t in thresholds), 1.0))
    return out


# ---------------------------------------------------------------------------
# output

COLUMNS = ("scope", "n", "mae", "mape", "rmse")


def _fmt(v) -> str:
    return "" if v is None else repr(v)


def write_reports(reports: Sequence[MetricsReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in reports:
            writer.writerow([r.scope, r.n, _fmt(r.mae), _fmt(r.mape), _fmt(r.rmse)])


def format_table(reports: Sequence[MetricsReport]) -> str:
    width = max(len("scope"), *(len(r.scope) for r in reports))
    lines = [f"{'scope':<{width}}  {'n':>7}  {'MAE (s)':>10}  {'MAPE (%)':>9}  {'RMSE (s)':>10}"]
    for r in reports:
        if r.n == 0:
            lines.append(f"{r.scope:<{width}}  {0:>7}  {'-':>10}  {'-':>9}  {'-':>10}")
        else:
            lines.append(f"{r.scope:<{width}}  {r.n:>7}  {r.mae:>10.2f}  {r.mape:>9.2f}  {r.rmse:>10.2f}")
    return "\n".join(lines)
