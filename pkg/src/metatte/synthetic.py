"""Synthetic multi-city trajectory corpora with a known travel-time generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from typing import Sequence
from zoneinfo import ZoneInfo

import numpy as np

from .errors import ConsistencyError, ConfigurationError
from .trajectory import (
    CHENGDU_SPLIT,
    EARTH_RADIUS_KM,
    DateRange,
    GpsPoint,
    RawTrajectory,
    TaskThresholds,
    path_length_km,
    weekday_hour,
)


@dataclass(frozen=True)
class CitySpec:
    task_id: str
    center_lat: float
    center_lon: float
    mean_speed: float  # m/s
    speed_sigma: float  # m/s, per-trip
    hour_multipliers: tuple[float, ...] = (1.0,) * 24
    weekday_multipliers: tuple[float, ...] = (1.0,) * 7
    trip_km: tuple[float, float] = (2.0, 8.0)
    sampling_interval: float = 30.0
    timezone: str = "UTC"
    max_turn_deg: float = 30.0
    days: tuple[DateRange, ...] = (CHENGDU_SPLIT.train, CHENGDU_SPLIT.val, CHENGDU_SPLIT.test)

    def __post_init__(self):
        if self.mean_speed <= 0 or self.speed_sigma < 0:
            raise ConfigurationError("mean_speed must be positive and speed_sigma non-negative")
        if len(self.hour_multipliers) != 24 or len(self.weekday_multipliers) != 7:
            raise ConfigurationError("need 24 hourly and 7 weekday multipliers")
        if min(self.hour_multipliers) <= 0 or min(self.weekday_multipliers) <= 0:
            raise ConfigurationError("speed multipliers must be positive")
        if not 0 < self.trip_km[0] < self.trip_km[1]:
            raise ConfigurationError(f"trip_km must satisfy 0 < min < max, got {self.trip_km}")
        if self.sampling_interval <= 0:
            raise ConfigurationError("sampling_interval must be positive")

    @property
    def step_km(self) -> float:
        """Spacing of emitted GPS points: distance covered in one interval at the nominal speed."""
        return self.mean_speed * self.sampling_interval / 1000.0

    def nominal_speed(self, t: float) -> float:
        weekday, hour = weekday_hour(t, self.timezone)
        return self.mean_speed * self.hour_multipliers[hour] * self.weekday_multipliers[weekday]


@dataclass
class Corpus:
    spec: CitySpec
    trajectories: list[RawTrajectory] = field(default_factory=list)
    oracle: dict[str, float] = field(default_factory=dict)


def _destination(lat: float, lon: float, bearing: float, km: float) -> tuple[float, float]:
    d = km / EARTH_RADIUS_KM
    p1, l1 = math.radians(lat), math.radians(lon)
    p2 = math.asin(math.sin(p1) * math.cos(d) + math.cos(p1) * math.sin(d) * math.cos(bearing))
    l2 = l1 + math.atan2(math.sin(bearing) * math.sin(d) * math.cos(p1), math.cos(d) - math.sin(p1) * math.sin(p2))
    return math.degrees(p2), (math.degrees(l2) + 540.0) % 360.0 - 180.0


def _noise_factor(spec: CitySpec, rng: np.random.Generator) -> float:
    return max(0.2, 1.0 + spec.speed_sigma / spec.mean_speed * rng.standard_normal())


def generate_trip(
    spec: CitySpec, trip_id: str, length_km: float, start_time: float, rng: np.random.Generator,
    noise: float | None = None,
) -> tuple[RawTrajectory, float]:
    """One random-walk trip of the given path length; returns it with its oracle seconds."""
    factor = _noise_factor(spec, rng) if noise is None else noise
    nominal = spec.nominal_speed(start_time)
    speed = nominal * factor
    lat = spec.center_lat + rng.uniform(-0.05, 0.05)
    lon = spec.center_lon + rng.uniform(-0.05, 0.05)
    bearing = rng.uniform(0, 2 * math.pi)
    max_turn = math.radians(spec.max_turn_deg)
    t = start_time
    points = [GpsPoint(lat, lon, t)]
    remaining = length_km
    while remaining > 1e-9:
        seg = min(spec.step_km, remaining)
        lat, lon = _destination(lat, lon, bearing, seg)
        seg = path_length_km(RawTrajectory("", "", [points[-1], GpsPoint(lat, lon, t)]))
        t = t + seg * 1000.0 / speed
        points.append(GpsPoint(lat, lon, t))
        remaining -= seg
        bearing += rng.uniform(-max_turn, max_turn)
    traj = RawTrajectory(trip_id, spec.task_id, points)
    return traj, path_length_km(traj) * 1000.0 / nominal


def _day_pool(spec: CitySpec) -> list[date]:
    days = []
    for r in spec.days:
        d = r.start
        while d <= r.end:
            days.append(d)
            d += timedelta(days=1)
    return days


def generate_city(spec: CitySpec, n_trips: int, seed: int) -> Corpus:
    if n_trips < 1:
        raise ConfigurationError("n_trips must be at least 1")
    zone = ZoneInfo(spec.timezone)
    days = _day_pool(spec)
    corpus = Corpus(spec)
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n_trips)):
        rng = np.random.default_rng(child)
        day = days[rng.integers(len(days))]
        midnight = datetime.combine(day, time(0), zone).timestamp()
        start = float(midnight + rng.integers(0, 86400))
        length = rng.uniform(*spec.trip_km)
        traj, oracle = generate_trip(spec, f"{spec.task_id}-{i:06d}", length, start, rng)
        corpus.trajectories.append(traj)
        corpus.oracle[traj.id] = oracle
    return corpus


def oracle_predictor(trip: RawTrajectory, spec: CitySpec) -> float:
    """Noise-free travel time of a generated trip."""
    if trip.task_id != spec.task_id:
        raise ConsistencyError(f"trip {trip.id!r} belongs to {trip.task_id!r}, not {spec.task_id!r}")
    return path_length_km(trip) * 1000.0 / spec.nominal_speed(trip.points[0].t)


def write_points(corpus: Corpus, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for traj in corpus.trajectories:
            for p in traj.points:
                writer.writerow([traj.id, repr(p.lat), repr(p.lon), repr(p.t)])


def write_oracle(corpus: Corpus, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trip_id", "oracle_seconds"])
        for trip_id, seconds in corpus.oracle.items():
            writer.writerow([trip_id, repr(seconds)])


def read_oracle(path) -> dict[str, float]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        return {row[0]: float(row[1]) for row in reader if row}


# ---------------------------------------------------------------------------
# the two-city benchmark

def _bumps(centers: Sequence[tuple[float, float, float]]) -> tuple[float, ...]:
    """Hourly multipliers: 1 minus Gaussian congestion dips ``(hour, depth, width)``."""
    out = []
    for h in range(24):
        m = 1.0
        for c, depth, width in centers:
            dist = min(abs(h - c), 24 - abs(h - c))
            m -= depth * math.exp(-(dist**2) / (2 * width**2))
        out.append(round(m, 6))
    return tuple(out)


SLOW_CITY = CitySpec(
    task_id="slowtown",
    center_lat=30.66,
    center_lon=104.06,
    mean_speed=8.0,
    speed_sigma=0.5,
    hour_multipliers=_bumps([(8, 0.3, 1.5), (18, 0.35, 1.5)]),
    weekday_multipliers=(1.0, 1.0, 1.0, 1.0, 0.9, 1.15, 1.2),
    timezone="Asia/Shanghai",
)
FAST_CITY = CitySpec(
    task_id="fastville",
    center_lat=41.15,
    center_lon=-8.61,
    mean_speed=14.0,
    speed_sigma=0.875,
    hour_multipliers=_bumps([(8.5, 0.25, 1.5), (17.5, 0.3, 2.0), (13, 0.1, 2.0)]),
    weekday_multipliers=(0.95, 1.0, 1.0, 1.0, 1.0, 1.1, 1.25),
    # denser fixes keep the 240 m point spacing of the slow city, so trips of
    # equal length have equal sequence lengths in both cities
    sampling_interval=240.0 / 14.0,
    timezone="Europe/Lisbon",
)
SYNTHETIC_THRESHOLDS = {
    spec.task_id: TaskThresholds(60.0, 2400.0, 1.5, 10.0, spec.timezone) for spec in (SLOW_CITY, FAST_CITY)
}


def benchmark_tasks(
    specs: Sequence[CitySpec] = (SLOW_CITY, FAST_CITY),
    n_trips: int = 2000,
    seed: int = 0,
    split=CHENGDU_SPLIT,
):
    """Generate every city, run it through the preprocessing pipeline and build tasks.

    Returns ``(tasks, preprocess_config, corpora)``.
    """
    from .trajectory import ParseResult, PreprocessConfig, build_tasks, preprocess_task

    cfg = PreprocessConfig({s.task_id: SYNTHETIC_THRESHOLDS.get(s.task_id) or TaskThresholds(
        60.0, 2400.0, 1.5, 10.0, s.timezone) for s in specs})
    corpora = {}
    splits = {}
    for spec, ss in zip(specs, np.random.SeedSequence(seed).spawn(len(specs))):
        corpus = generate_city(spec, n_trips, int(ss.generate_state(1)[0]))
        corpora[spec.task_id] = corpus
        splits[spec.task_id], _ = preprocess_task(ParseResult(corpus.trajectories), spec.task_id, cfg, split)
    return build_tasks(splits), cfg, corpora
