"""Hourly price ingestion, day slicing, worst-case bounds, and dataset splits.

The CSV schema is ``timestamp,price`` with ISO-8601 timestamps and hourly
spacing; a header row is optional.  Days are calendar-aligned (first slot at
hour 0) and partial days are dropped, never padded.
"""

from __future__ import annotations

import bisect
import csv
import logging
import math
import random
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

HOUR = timedelta(hours=1)

# Lower bounds used in threshold construction must stay positive; empirical
# minima at or below zero (negative LMPs) are clamped to this floor.
DEFAULT_PRICE_FLOOR = 0.01


@dataclass(frozen=True)
class PriceSeries:
    """Validated hourly price series."""

    timestamps: tuple[datetime, ...]
    prices: tuple[float, ...]

    def __post_init__(self):
        if len(self.timestamps) != len(self.prices):
            raise ValueError("timestamps and prices must have equal length")
        if len(self.prices) < 1:
            raise ValueError("series must contain at least one row")
        for i, p in enumerate(self.prices):
            if not math.isfinite(p):
                raise ValueError(f"non-finite price at row {i + 1}")
        for i in range(1, len(self.timestamps)):
            delta = self.timestamps[i] - self.timestamps[i - 1]
            if delta == timedelta(0):
                raise ValueError(f"duplicate timestamp at row {i + 1}: {self.timestamps[i]}")
            if delta != HOUR:
                raise ValueError(
                    f"non-hourly gap at row {i + 1}: {self.timestamps[i - 1]} -> {self.timestamps[i]}"
                )

    def __len__(self) -> int:
        return len(self.prices)


@dataclass(frozen=True)
class DayPrices:
    """One fixed-horizon day of prices."""

    day_id: str
    values: tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise ValueError("day must contain at least one value")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError(f"non-finite price in day {self.day_id}")


@dataclass(frozen=True)
class PriceBounds:
    """Worst-case price bounds for the remaining horizon at time ``t_start``.

    ``z_min`` / ``z_max`` are the sorted remaining per-slot bounds (ascending /
    descending).  ``per_slot_min`` / ``per_slot_max`` retain slot identity for
    slots ``t_start..horizon`` so downstream consumers can re-slice as time
    advances.
    """

    z_min: tuple[float, ...]
    z_max: tuple[float, ...]
    lambda_min: float
    lambda_max: float
    per_slot_min: tuple[float, ...]
    per_slot_max: tuple[float, ...]
    t_start: int = 1
    horizon: int = 0

    def __post_init__(self):
        if self.lambda_min <= 0:
            raise ValueError("lambda_min must be positive")
        if any(self.z_min[i] > self.z_min[i + 1] for i in range(len(self.z_min) - 1)):
            raise ValueError("z_min must be sorted non-decreasing")
        if any(self.z_max[i] < self.z_max[i + 1] for i in range(len(self.z_max) - 1)):
            raise ValueError("z_max must be sorted non-increasing")
        if self.z_min and self.lambda_min > min(self.z_min) + 1e-12:
            raise ValueError("lambda_min must not exceed z_min entries")
        if self.z_max and self.lambda_max < max(self.z_max) - 1e-12:
            raise ValueError("lambda_max must not fall below z_max entries")

    def remaining(self, t: int) -> tuple[list[float], list[float]]:
        """Sorted (ascending mins, descending maxes) for slots t..horizon."""
        if t < self.t_start:
            raise ValueError(f"t={t} precedes bound coverage starting at {self.t_start}")
        off = t - self.t_start
        return sorted(self.per_slot_min[off:]), sorted(self.per_slot_max[off:], reverse=True)

    def slot(self, t: int) -> tuple[float, float]:
        """(lower, upper) bound for absolute slot t."""
        off = t - self.t_start
        if off < 0 or off >= len(self.per_slot_min):
            raise ValueError(f"slot {t} outside bound coverage")
        return self.per_slot_min[off], self.per_slot_max[off]


class EmpiricalCdf:
    """Right-continuous empirical CDF with inclusive tail evaluators."""

    def __init__(self, samples):
        arr = np.sort(np.asarray(samples, dtype=float))
        if arr.size == 0:
            raise ValueError("empirical CDF needs at least one sample")
        if not np.all(np.isfinite(arr)):
            raise ValueError("samples must be finite")
        self.samples = arr

    def prob_le(self, x: float) -> float:
        """P(X <= x)."""
        return bisect.bisect_right(self.samples, x) / self.samples.size

    def prob_ge(self, x: float) -> float:
        """P(X >= x) = 1 - F(x-), computed as an exact sample fraction."""
        return (self.samples.size - bisect.bisect_left(self.samples, x)) / self.samples.size

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.choice(self.samples))


class LognormalCdf:
    """Parametric lognormal alternative to the empirical CDF."""

    def __init__(self, mu: float, sigma: float):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.mu = mu
        self.sigma = sigma

    def prob_le(self, x: float) -> float:
        if x <= 0:
            return 0.0
        z = (math.log(x) - self.mu) / (self.sigma * math.sqrt(2.0))
        return 0.5 * (1.0 + math.erf(z))

    def prob_ge(self, x: float) -> float:
        return 1.0 - self.prob_le(x)

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.lognormal(self.mu, self.sigma))


@dataclass(frozen=True)
class PriceDistribution:
    """Per-hour cumulative distribution evaluators F_t for t = 1..T."""

    cdfs: tuple = field(default_factory=tuple)

    @property
    def horizon(self) -> int:
        return len(self.cdfs)

    def cdf(self, t: int):
        """Evaluator for hour t (1-based)."""
        return self.cdfs[t - 1]

    def sample_day(self, rng: np.random.Generator, day_id: str = "sim") -> DayPrices:
        """Draw one synthetic day, each hour independently from its F_t."""
        return DayPrices(day_id, tuple(c.sample(rng) for c in self.cdfs))


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[DayPrices, ...]
    calib: tuple[DayPrices, ...]
    test: tuple[DayPrices, ...]


def load_price_csv(path) -> PriceSeries:
    """Read a two-column (timestamp, price) CSV into a validated PriceSeries.

    Rows are sorted by timestamp before validation; duplicate timestamps and
    non-hourly gaps are rejected with the offending row reported.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"price file not found: {path}")
    rows: list[tuple[datetime, float]] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        for lineno, raw in enumerate(reader, start=1):
            if not raw or all(not cell.strip() for cell in raw):
                continue
            if len(raw) < 2:
                raise ValueError(f"line {lineno}: expected 'timestamp,price', got {raw!r}")
            ts_text, price_text = raw[0].strip(), raw[1].strip()
            try:
                ts = datetime.fromisoformat(ts_text)
                price = float(price_text)
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise ValueError(f"line {lineno}: unparsable row {raw!r}") from None
            if not math.isfinite(price):
                raise ValueError(f"line {lineno}: non-finite price {price_text!r}")
            rows.append((ts, price))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    rows.sort(key=lambda r: r[0])
    return PriceSeries(tuple(r[0] for r in rows), tuple(r[1] for r in rows))


def slice_days(series: PriceSeries, horizon: int) -> list[DayPrices]:
    """Cut a series into consecutive blocks of ``horizon`` hours.

    The first block is anchored at the first hour-0 timestamp; partial leading
    and trailing blocks are dropped with a logged warning.
    """
    if horizon <= 0:
        raise ValueError("horizon must be a positive integer")
    start = 0
    while start < len(series) and (
        series.timestamps[start].hour != 0 or series.timestamps[start].minute != 0
    ):
        start += 1
    if start > 0:
        log.warning("slice_days: dropped %d leading points before first hour-0 slot", start)
    n_days = (len(series) - start) // horizon
    trailing = (len(series) - start) - n_days * horizon
    if trailing > 0:
        log.warning("slice_days: dropped %d trailing points (partial day)", trailing)
    days = []
    for d in range(n_days):
        lo = start + d * horizon
        days.append(
            DayPrices(series.timestamps[lo].isoformat(), tuple(series.prices[lo : lo + horizon]))
        )
    return days


def _clamp_floor(values, floor: float, label: str) -> list[float]:
    clamped = [v if v > 0 else floor for v in values]
    n = sum(1 for v in values if v <= 0)
    if n:
        log.warning("compute_bounds: clamped %d non-positive %s value(s) to %.4g", n, label, floor)
    return clamped


def compute_bounds(
    days: list[DayPrices],
    t: int,
    mode: str = "per-hour",
    floor: float = DEFAULT_PRICE_FLOOR,
) -> PriceBounds:
    """Worst-case price bounds over the remaining slots t..T.

    ``per-hour`` keeps one (min, max) pair per remaining slot; ``global``
    repeats the scalar envelope.  Non-positive lower bounds are clamped to
    ``floor`` so threshold ratio equations stay well posed.
    """
    if not days:
        raise ValueError("compute_bounds requires at least one day")
    horizon = len(days[0].values)
    if any(len(d.values) != horizon for d in days):
        raise ValueError("all days must share the same horizon")
    if not 1 <= t <= horizon:
        raise ValueError(f"t={t} outside 1..{horizon}")
    if mode not in ("per-hour", "global"):
        raise ValueError(f"unknown bounds mode {mode!r}")

    matrix = np.array([d.values for d in days], dtype=float)
    lam_min = float(matrix.min())
    lam_max = float(matrix.max())
    lam_min = _clamp_floor([lam_min], floor, "global lower bound")[0]
    lam_max = max(lam_max, lam_min)

    n_rem = horizon - t + 1
    if mode == "global":
        per_min = [lam_min] * n_rem
        per_max = [lam_max] * n_rem
    else:
        per_min = _clamp_floor(matrix[:, t - 1 :].min(axis=0).tolist(), floor, "per-slot lower bound")
        per_max = [max(v, floor) for v in matrix[:, t - 1 :].max(axis=0).tolist()]
    return PriceBounds(
        z_min=tuple(sorted(per_min)),
        z_max=tuple(sorted(per_max, reverse=True)),
        lambda_min=lam_min,
        lambda_max=lam_max,
        per_slot_min=tuple(per_min),
        per_slot_max=tuple(per_max),
        t_start=t,
        horizon=horizon,
    )


def fit_distribution(days: list[DayPrices], kind: str = "empirical") -> PriceDistribution:
    """Fit per-hour price distributions across days.

    ``empirical`` (default) builds hour-wise empirical CDFs; ``lognormal``
    fits a lognormal per hour by moment matching on log prices.
    """
    if not days:
        raise ValueError("fit_distribution requires at least one day")
    horizon = len(days[0].values)
    if any(len(d.values) != horizon for d in days):
        raise ValueError("all days must share the same horizon")
    cdfs = []
    for h in range(horizon):
        samples = np.array([d.values[h] for d in days], dtype=float)
        if kind == "empirical":
            cdfs.append(EmpiricalCdf(samples))
        elif kind == "lognormal":
            pos = np.clip(samples, DEFAULT_PRICE_FLOOR, None)
            logs = np.log(pos)
            sigma = float(logs.std(ddof=0))
            cdfs.append(LognormalCdf(float(logs.mean()), max(sigma, 1e-6)))
        else:
            raise ValueError(f"unknown distribution kind {kind!r}")
    return PriceDistribution(tuple(cdfs))


def split_dataset(
    days: list[DayPrices],
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    shuffled: bool = False,
) -> DatasetSplit:
    """Partition days into train/calib/test by floor allocation.

    Sizes are ``floor(n * ratio)`` per split with the remainder assigned to
    train.  Chronological order is kept unless ``shuffled``; shuffling is
    deterministic in ``seed``.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be three positive numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(days)
    if n < 3:
        raise ValueError("need at least 3 days to populate all splits")
    order = list(range(n))
    if shuffled:
        random.Random(seed).shuffle(order)
    n_train = int(n * ratios[0])
    n_calib = int(n * ratios[1])
    n_test = int(n * ratios[2])
    n_train += n - (n_train + n_calib + n_test)
    if min(n_train, n_calib, n_test) == 0:
        raise ValueError(f"ratios {ratios} leave an empty split for {n} days; provide more days")
    picked = [days[i] for i in order]
    return DatasetSplit(
        train=tuple(picked[:n_train]),
        calib=tuple(picked[n_train : n_train + n_calib]),
        test=tuple(picked[n_train + n_calib :]),
    )


def export_day_matrix(days: list[DayPrices], path) -> None:
    """Write the canonical day matrix CSV: day_id, h0..h{T-1}."""
    if not days:
        raise ValueError("no days to export")
    horizon = len(days[0].values)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["day_id"] + [f"h{i}" for i in range(horizon)])
        for d in days:
            writer.writerow([d.day_id] + [repr(v) for v in d.values])


def load_day_matrix(path) -> list[DayPrices]:
    """Read a day matrix CSV produced by :func:`export_day_matrix`."""
    days = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty day matrix")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                days.append(DayPrices(row[0], tuple(float(v) for v in row[1:])))
            except ValueError as exc:
                raise ValueError(f"{path} line {lineno}: {exc}") from None
    if not days:
        raise ValueError(f"{path}: no day rows")
    return days
