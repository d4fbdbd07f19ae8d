"""Daily POI visit series: CSV ingestion, synthetic generation, windowing, splits."""

from __future__ import annotations

import csv
import datetime as dt
import io
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadRatiosError,
    EmptyInputError,
    InvalidSpecError,
    MalformedRowError,
    MissingFileError,
    NegativeCountError,
    NonContiguousDatesError,
    SeriesTooShortError,
)

CSV_HEADER = ("poi_id", "category", "city", "date", "visits")
DEFAULT_HISTORY = 15
ONE_DAY = dt.timedelta(days=1)


@dataclass(frozen=True)
class VisitSeries:
    poi_id: int
    category: str
    city: str
    start_date: dt.date
    counts: tuple[int, ...]

    def __post_init__(self):
        if not self.counts:
            raise ValueError(f"poi {self.poi_id}: counts must be non-empty")
        if any(c < 0 for c in self.counts):
            raise ValueError(f"poi {self.poi_id}: counts must be non-negative")

    @property
    def dates(self) -> list[dt.date]:
        return [self.start_date + k * ONE_DAY for k in range(len(self.counts))]


@dataclass(frozen=True)
class ForecastInstance:
    poi_id: int
    category: str
    city: str
    history_dates: tuple[dt.date, ...]
    history_counts: tuple[int, ...]
    target_date: dt.date
    target_count: int

    @property
    def ref(self) -> str:
        """Stable identifier used to link rendered prompts back to instances."""
        return f"{self.city}:{self.poi_id}:{self.target_date.isoformat()}"

    @property
    def n(self) -> int:
        return len(self.history_counts)


@dataclass(frozen=True)
class DatasetSplit:
    train: list[ForecastInstance]
    validation: list[ForecastInstance]
    test: list[ForecastInstance]


@dataclass(frozen=True)
class CategoryProfile:
    label: str
    base_rate: float
    weekly_profile: tuple[float, ...]  # Monday .. Sunday


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic city generator.

    ``noise`` is the variance of a mean-one Gamma multiplier applied to each
    day's Poisson rate (a negative-binomial style overdispersion).
    ``count_model="point"`` replaces the Poisson draw with rounding of the
    rate, which together with ``noise=0`` yields a deterministic series.
    """

    num_pois: int
    categories: tuple[CategoryProfile, ...]
    start_date: dt.date
    num_days: int
    noise: float = 0.0
    seed: int = 0
    city: str = "synthetic"
    count_model: str = "poisson"
    first_poi_id: int = 0

    def validate(self, n: int = DEFAULT_HISTORY) -> None:
        if self.num_pois <= 0:
            raise InvalidSpecError("num_pois", "must be positive")
        if not self.categories:
            raise InvalidSpecError("categories", "at least one category is required")
        labels = [c.label for c in self.categories]
        if len(set(labels)) != len(labels):
            raise InvalidSpecError("categories", "labels must be unique")
        for c in self.categories:
            if not c.base_rate > 0:
                raise InvalidSpecError(f"categories.{c.label}.base_rate", "must be > 0")
            if len(c.weekly_profile) != 7:
                raise InvalidSpecError(f"categories.{c.label}.weekly_profile", "needs 7 entries")
            if not all(p > 0 for p in c.weekly_profile):
                raise InvalidSpecError(f"categories.{c.label}.weekly_profile", "entries must be > 0")
        if self.num_days < n + 1:
            raise InvalidSpecError("num_days", f"must be at least {n + 1}")
        if not self.noise >= 0 or math.isinf(self.noise):
            raise InvalidSpecError("noise", "must be a finite non-negative number")
        if not 0 <= self.seed < 2**64:
            raise InvalidSpecError("seed", "must fit in an unsigned 64-bit integer")
        if self.count_model not in ("poisson", "point"):
            raise InvalidSpecError("count_model", "must be 'poisson' or 'point'")


# ---------------------------------------------------------------------------
# CSV interchange

def _open_text(path: Path) -> str:
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise MissingFileError(str(path)) from exc
    return raw.decode("utf-8-sig")


def ingest_csv(path: str | Path) -> list[VisitSeries]:
    """Read ``poi_id,category,city,date,visits`` rows into one series per POI.

    Rows may appear in any order. A missing day inside a POI's date range is
    an error; nothing is imputed.
    """
    path = Path(path)
    text = _open_text(path)
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise MalformedRowError(1, "missing header") from None
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise MalformedRowError(1, f"expected header {','.join(CSV_HEADER)}")

    rows: dict[int, list[tuple[dt.date, int]]] = defaultdict(list)
    labels: dict[int, tuple[str, str]] = {}
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 5:
            raise MalformedRowError(line_no, f"expected 5 fields, got {len(row)}")
        try:
            poi_id = int(row[0])
            day = dt.date.fromisoformat(row[3].strip())
            visits = int(row[4])
        except ValueError as exc:
            raise MalformedRowError(line_no, str(exc)) from None
        if poi_id < 0:
            raise MalformedRowError(line_no, "poi_id must be non-negative")
        if visits < 0:
            raise NegativeCountError(poi_id, day)
        key = (row[1], row[2])
        if labels.setdefault(poi_id, key) != key:
            raise MalformedRowError(line_no, f"poi {poi_id} changes category/city")
        rows[poi_id].append((day, visits))

    series = []
    for poi_id in sorted(rows):
        entries = sorted(rows[poi_id])
        for (d0, _), (d1, _) in zip(entries, entries[1:]):
            if d1 - d0 != ONE_DAY:
                raise NonContiguousDatesError(poi_id, f"{d0} -> {d1}")
        category, city = labels[poi_id]
        series.append(
            VisitSeries(poi_id, category, city, entries[0][0], tuple(v for _, v in entries))
        )
    return series


def write_csv(series: Iterable[VisitSeries], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for s in series:
            for day, count in zip(s.dates, s.counts):
                writer.writerow([s.poi_id, s.category, s.city, day.isoformat(), count])


# ---------------------------------------------------------------------------
# Synthetic data

def generate_synthetic(spec: SyntheticSpec) -> list[VisitSeries]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    weekdays = np.array(
        [(spec.start_date + k * ONE_DAY).weekday() for k in range(spec.num_days)]
    )
    out = []
    for p in range(spec.num_pois):
        cat = spec.categories[p % len(spec.categories)]
        mean = cat.base_rate * np.asarray(cat.weekly_profile, dtype=float)[weekdays]
        if spec.noise > 0:
            shape = 1.0 / spec.noise
            mean = mean * rng.gamma(shape, 1.0 / shape, size=spec.num_days)
        if spec.count_model == "poisson":
            counts = rng.poisson(mean)
        else:
            counts = np.floor(mean + 0.5).astype(np.int64)
        out.append(
            VisitSeries(
                poi_id=spec.first_poi_id + p,
                category=cat.label,
                city=spec.city,
                start_date=spec.start_date,
                counts=tuple(int(c) for c in counts),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Windowing and splitting

def make_windows(series: VisitSeries, n: int = DEFAULT_HISTORY) -> list[ForecastInstance]:
    if n <= 0:
        raise ValueError("history length must be positive")
    counts = series.counts
    if len(counts) < n + 1:
        raise SeriesTooShortError(
            f"poi {series.poi_id}: {len(counts)} days cannot fill a {n}-day window plus target"
        )
    dates = series.dates
    return [
        ForecastInstance(
            poi_id=series.poi_id,
            category=series.category,
            city=series.city,
            history_dates=tuple(dates[k : k + n]),
            history_counts=tuple(counts[k : k + n]),
            target_date=dates[k + n],
            target_count=counts[k + n],
        )
        for k in range(len(counts) - n)
    ]


def windows_for(series: Sequence[VisitSeries], n: int = DEFAULT_HISTORY) -> list[ForecastInstance]:
    return [inst for s in series for inst in make_windows(s, n)]


def _bucket_sizes(total: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    # Cumulative rounding keeps every bucket within one instance of its share.
    train_end = int(math.floor(total * ratios[0] + 0.5 + 1e-9))
    val_end = int(math.floor(total * (ratios[0] + ratios[1]) + 0.5 + 1e-9))
    return train_end, val_end - train_end, total - val_end


def _check_ratios(ratios: Sequence[float]) -> None:
    if len(ratios) != 3 or any(not r > 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatiosError(tuple(ratios))


def split_dataset(
    instances: Sequence[ForecastInstance],
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    seed: int = 0,
    mode: str = "chronological",
) -> DatasetSplit:
    """Split instances per POI into train/validation/test.

    ``mode="chronological"`` (default) orders each POI's instances by target
    date, so the test horizon is strictly later than training.
    ``mode="random"`` shuffles within each POI instead and exists only for
    sensitivity checks. Combined output lists are ordered by
    (target_date, tie-break), where ties across POIs on the same date are
    broken by a seeded permutation of the POIs.
    """
    if not instances:
        raise EmptyInputError("cannot split an empty instance list")
    _check_ratios(ratios)
    if mode not in ("chronological", "random"):
        raise ValueError(f"unknown split mode {mode!r}")

    rng = np.random.default_rng(seed)
    by_poi: dict[tuple[str, int], list[ForecastInstance]] = defaultdict(list)
    for inst in instances:
        by_poi[(inst.city, inst.poi_id)].append(inst)
    keys = sorted(by_poi)
    tie_rank = {key: int(r) for key, r in zip(keys, rng.permutation(len(keys)))}

    buckets: tuple[list, list, list] = ([], [], [])
    for key in keys:
        group = sorted(by_poi[key], key=lambda i: i.target_date)
        if mode == "random":
            group = [group[j] for j in rng.permutation(len(group))]
        n_train, n_val, _ = _bucket_sizes(len(group), ratios)
        parts = (group[:n_train], group[n_train : n_train + n_val], group[n_train + n_val :])
        for bucket, part in zip(buckets, parts):
            bucket.extend((inst, tie_rank[key]) for inst in part)

    ordered = [
        [inst for inst, _ in sorted(b, key=lambda pair: (pair[0].target_date, pair[1]))]
        for b in buckets
    ]
    return DatasetSplit(*ordered)
