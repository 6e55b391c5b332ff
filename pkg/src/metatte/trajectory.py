"""GPS trajectory ingestion, filtering rules, delta representation and task assembly."""

from __future__ import annotations

import csv
import logging
import math
import os
import warnings
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime
from typing import Iterable, Sequence
from zoneinfo import ZoneInfo

import numpy as np

from .errors import ConfigurationError, DegenerateInputError

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
DAYS_PER_WEEK = 7
HOURS_PER_DAY = 24

# column order of MetaTrajectory.rows
DLAT, DLON, WEEKDAY, HOUR, TIME = range(5)


@dataclass(frozen=True)
class GpsPoint:
    lat: float
    lon: float
    t: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")
        if not self.t >= 0:
            raise ValueError(f"timestamp {self.t} is negative")


@dataclass
class RawTrajectory:
    id: str
    task_id: str
    points: list[GpsPoint]

    @property
    def duration(self) -> float:
        return self.points[-1].t - self.points[0].t


@dataclass
class MetaTrajectory:
    """Per-segment rows ``(dlat, dlon, weekday, hour, t)`` plus the travel-time label."""

    id: str
    task_id: str
    rows: np.ndarray
    label: float
    distance_km: float = float("nan")

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def start_time(self) -> float:
        return float(self.rows[0, TIME])


@dataclass(frozen=True)
class TaskThresholds:
    """Rule-1 frequency bounds for one city, plus its civil time zone."""

    min_time: float
    max_time: float
    min_dist: float
    max_dist: float
    timezone: str = "UTC"

    def __post_init__(self):
        if not (0 < self.min_time < self.max_time):
            raise ConfigurationError(f"need 0 < min_time < max_time, got {self.min_time}, {self.max_time}")
        if not (0 < self.min_dist < self.max_dist):
            raise ConfigurationError(f"need 0 < min_dist < max_dist, got {self.min_dist}, {self.max_dist}")
        try:
            ZoneInfo(self.timezone)
        except Exception as exc:
            raise ConfigurationError(f"unknown time zone {self.timezone!r}") from exc


CHENGDU = TaskThresholds(315.0, 1174.0, 1.84, 8.14, "Asia/Shanghai")
PORTO = TaskThresholds(315.0, 945.0, 1.74, 7.32, "Europe/Lisbon")


@dataclass
class PreprocessConfig:
    tasks: dict[str, TaskThresholds] = field(default_factory=dict)

    def for_task(self, task_id: str) -> TaskThresholds:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise ConfigurationError(f"no preprocessing thresholds for task {task_id!r}") from None


# ---------------------------------------------------------------------------
# parsing


@dataclass
class ParseResult:
    trajectories: list[RawTrajectory]
    skipped: int = 0
    diagnostics: list[str] = field(default_factory=list)


def parse_trajectories(source, task_id: str, has_header: bool = False) -> ParseResult:
    """Read ``traj_id, lat, lon, unix_seconds`` rows into trajectories.

    ``source`` is a path or an iterable of text lines.  Rows that fail to parse
    or violate coordinate bounds are skipped and counted; an unreadable path
    raises ``OSError``.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="", encoding="utf-8") as fh:
            return _parse_lines(fh, task_id, has_header)
    return _parse_lines(source, task_id, has_header)


def _parse_lines(lines: Iterable[str], task_id: str, has_header: bool) -> ParseResult:
    groups: dict[str, list[GpsPoint]] = {}
    result = ParseResult([])
    for lineno, row in enumerate(csv.reader(lines), start=1):
        if has_header and lineno == 1:
            continue
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            if len(row) != 4:
                raise ValueError(f"expected 4 fields, got {len(row)}")
            traj_id = row[0].strip()
            point = GpsPoint(float(row[1]), float(row[2]), float(row[3]))
            if not all(math.isfinite(v) for v in (point.lat, point.lon, point.t)):
                raise ValueError("non-finite value")
        except ValueError as exc:
            result.skipped += 1
            result.diagnostics.append(f"line {lineno}: {exc}")
            continue
        groups.setdefault(traj_id, []).append(point)
    for traj_id, points in groups.items():
        points.sort(key=lambda p: p.t)
        result.trajectories.append(RawTrajectory(traj_id, task_id, points))
    if result.skipped:
        logger.warning("task %s: skipped %d malformed rows", task_id, result.skipped)
    return result


# ---------------------------------------------------------------------------
# geometry


def haversine_km(a: GpsPoint, b: GpsPoint) -> float:
    lat1, lon1, lat2, lon2 = map(math.radians, (a.lat, a.lon, b.lat, b.lon))
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def path_length_km(traj: RawTrajectory) -> float:
    pts = traj.points
    if len(pts) < 2:
        raise DegenerateInputError(f"trajectory {traj.id!r} has {len(pts)} point(s); path length needs 2")
    return math.fsum(haversine_km(p, q) for p, q in zip(pts, pts[1:]))


# ---------------------------------------------------------------------------
# rules

RULE1_TIME = "rule1_time"
RULE1_DISTANCE = "rule1_distance"
RULE2 = "rule2"
RULE3 = "rule3"
RULES = (RULE1_TIME, RULE1_DISTANCE, RULE2, RULE3)


@dataclass(frozen=True)
class RuleVerdict:
    keep: bool
    reason: str | None = None


KEEP = RuleVerdict(True)


def apply_rules(traj: RawTrajectory, cfg: PreprocessConfig) -> RuleVerdict:
    """Keep a trajectory only if it passes the distinct-point, positive-duration
    and frequency-range rules.

    The degeneracy rules are checked before the range rule so a single-point or
    zero-duration trip is reported under its own rule rather than as an
    out-of-range time or distance.
    """
    th = cfg.for_task(traj.task_id)
    if len({(p.lat, p.lon) for p in traj.points}) < 2:
        return RuleVerdict(False, RULE2)
    if not traj.duration > 0:
        return RuleVerdict(False, RULE3)
    if not th.min_time <= traj.duration <= th.max_time:
        return RuleVerdict(False, RULE1_TIME)
    if not th.min_dist <= path_length_km(traj) <= th.max_dist:
        return RuleVerdict(False, RULE1_DISTANCE)
    return KEEP


# ---------------------------------------------------------------------------
# representation


def weekday_hour(t: float, tz: str | ZoneInfo = "UTC") -> tuple[int, int]:
    """Local day of week (Monday = 0) and hour of day for a UNIX timestamp."""
    zone = tz if isinstance(tz, ZoneInfo) else ZoneInfo(tz)
    local = datetime.fromtimestamp(t, zone)
    return local.weekday(), local.hour


def to_meta_trajectory(traj: RawTrajectory, tz: str | ZoneInfo = "UTC") -> MetaTrajectory:
    pts = traj.points
    if len(pts) < 2:
        raise DegenerateInputError(f"trajectory {traj.id!r} needs at least 2 points")
    zone = tz if isinstance(tz, ZoneInfo) else ZoneInfo(tz)
    rows = np.empty((len(pts) - 1, 5))
    for j, (p, q) in enumerate(zip(pts, pts[1:])):
        w, h = weekday_hour(p.t, zone)
        rows[j] = (q.lat - p.lat, q.lon - p.lon, w, h, p.t)
    label = pts[-1].t - pts[0].t
    distance = path_length_km(traj)
    return MetaTrajectory(traj.id, traj.task_id, rows, float(label), distance)


# ---------------------------------------------------------------------------
# date splits


@dataclass(frozen=True)
class DateRange:
    start: date
    end: date  # inclusive

    def __post_init__(self):
        if self.end < self.start:
            raise ConfigurationError(f"date range ends before it starts: {self.start} .. {self.end}")

    def __contains__(self, day: date) -> bool:
        return self.start <= day <= self.end

    @classmethod
    def parse(cls, text: str) -> "DateRange":
        start, _, end = text.partition("..")
        return cls(date.fromisoformat(start.strip()), date.fromisoformat(end.strip()))

    def __str__(self) -> str:
        return f"{self.start.isoformat()}..{self.end.isoformat()}"


@dataclass(frozen=True)
class SplitRanges:
    train: DateRange
    val: DateRange
    test: DateRange

    def __post_init__(self):
        ordered = (self.train, self.val, self.test)
        for a, b in zip(ordered, ordered[1:]):
            if not a.end < b.start:
                raise ConfigurationError(f"date ranges overlap or are out of order: {a} and {b}")


CHENGDU_SPLIT = SplitRanges(
    DateRange(date(2014, 8, 3), date(2014, 8, 16)),
    DateRange(date(2014, 8, 21), date(2014, 8, 22)),
    DateRange(date(2014, 8, 24), date(2014, 8, 29)),
)
PORTO_SPLIT = SplitRanges(
    DateRange(date(2013, 7, 1), date(2014, 2, 28)),
    DateRange(date(2014, 3, 1), date(2014, 4, 1)),
    DateRange(date(2014, 5, 1), date(2014, 7, 1)),
)


@dataclass
class Split:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    discarded: int = 0


def _start_time(traj) -> float:
    if isinstance(traj, RawTrajectory):
        return traj.points[0].t
    return traj.start_time


def split_by_date(trajs: Sequence, ranges: SplitRanges, tz: str | ZoneInfo = "UTC") -> Split:
    """Assign each trajectory by the local date of its first timestamp."""
    zone = tz if isinstance(tz, ZoneInfo) else ZoneInfo(tz)
    out = Split()
    for traj in trajs:
        day = datetime.fromtimestamp(_start_time(traj), zone).date()
        if day in ranges.train:
            out.train.append(traj)
        elif day in ranges.val:
            out.val.append(traj)
        elif day in ranges.test:
            out.test.append(traj)
        else:
            out.discarded += 1
    return out


# ---------------------------------------------------------------------------
# tasks


@dataclass
class TteTask:
    """One city's training pool; ``val`` and ``test`` are the pools shared by all tasks."""

    task_id: str
    train: list[MetaTrajectory]
    val: list[MetaTrajectory]
    test: list[MetaTrajectory]


class TaskConstructionError(ValueError):
    pass


def build_tasks(splits: dict[str, Split]) -> list[TteTask]:
    if not splits:
        raise TaskConstructionError("no tasks to build")
    for task_id, split in splits.items():
        if not split.train:
            raise TaskConstructionError(f"task {task_id!r} has an empty training split")
    val = [m for split in splits.values() for m in split.val]
    test = [m for split in splits.values() for m in split.test]
    return [TteTask(task_id, list(split.train), val, test) for task_id, split in splits.items()]


# ---------------------------------------------------------------------------
# scaling

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class Scaler:
    """Per-task standardization of the coordinate deltas and of the label."""

    delta_mean: tuple[float, float]
    delta_std: tuple[float, float]
    label_mean: float
    label_std: float

    def apply(self, traj: MetaTrajectory) -> MetaTrajectory:
        rows = traj.rows.copy()
        rows[:, DLAT] = (rows[:, DLAT] - self.delta_mean[0]) / self.delta_std[0]
        rows[:, DLON] = (rows[:, DLON] - self.delta_mean[1]) / self.delta_std[1]
        return MetaTrajectory(traj.id, traj.task_id, rows, traj.label, traj.distance_km)

    def normalize_label(self, seconds):
        return (np.asarray(seconds, dtype=np.float64) - self.label_mean) / self.label_std

    def denormalize_label(self, values):
        return np.asarray(values, dtype=np.float64) * self.label_std + self.label_mean

    def to_dict(self) -> dict:
        return {
            "delta_mean": list(self.delta_mean),
            "delta_std": list(self.delta_std),
            "label_mean": self.label_mean,
            "label_std": self.label_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(
            tuple(float(v) for v in d["delta_mean"]),
            tuple(float(v) for v in d["delta_std"]),
            float(d["label_mean"]),
            float(d["label_std"]),
        )


def _floored_std(values: np.ndarray, what: str) -> float:
    var = float(values.var())
    if var < VARIANCE_FLOOR:
        warnings.warn(f"{what} has variance {var:.3g}; flooring at {VARIANCE_FLOOR}", RuntimeWarning)
        var = VARIANCE_FLOOR
    return math.sqrt(var)


def fit_scaler(train: Sequence[MetaTrajectory]) -> Scaler:
    if not train:
        raise DegenerateInputError("cannot fit a scaler on an empty training set")
    rows = np.concatenate([m.rows for m in train])
    labels = np.array([m.label for m in train])
    return Scaler(
        (float(rows[:, DLAT].mean()), float(rows[:, DLON].mean())),
        (_floored_std(rows[:, DLAT], "latitude delta"), _floored_std(rows[:, DLON], "longitude delta")),
        float(labels.mean()),
        _floored_std(labels, "travel time label"),
    )


# ---------------------------------------------------------------------------
# end-to-end


@dataclass
class TaskReport:
    task_id: str
    parsed: int = 0
    skipped_rows: int = 0
    kept: int = 0
    dropped: Counter = field(default_factory=Counter)
    train: int = 0
    val: int = 0
    test: int = 0
    discarded: int = 0

    COLUMNS = (
        "task_id", "parsed", "skipped_rows", "kept", *(f"drop_{r}" for r in RULES),
        "train", "val", "test", "discarded",
    )

    def row(self) -> list:
        return [
            self.task_id, self.parsed, self.skipped_rows, self.kept,
            *(self.dropped.get(r, 0) for r in RULES),
            self.train, self.val, self.test, self.discarded,
        ]


def preprocess_task(
    parsed: ParseResult, task_id: str, cfg: PreprocessConfig, ranges: SplitRanges
) -> tuple[Split, TaskReport]:
    th = cfg.for_task(task_id)
    report = TaskReport(task_id, parsed=len(parsed.trajectories), skipped_rows=parsed.skipped)
    kept = []
    for traj in parsed.trajectories:
        verdict = apply_rules(traj, cfg)
        if verdict.keep:
            kept.append(to_meta_trajectory(traj, th.timezone))
        else:
            report.dropped[verdict.reason] += 1
    report.kept = len(kept)
    split = split_by_date(kept, ranges, th.timezone)
    report.train, report.val, report.test = len(split.train), len(split.val), len(split.test)
    report.discarded = split.discarded
    return split, report


def write_report(reports: Sequence[TaskReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TaskReport.COLUMNS)
        for r in reports:
            writer.writerow(r.row())
