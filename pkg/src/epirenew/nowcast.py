"""Reporting-delay correction from a reporting triangle.

Delays are measured in whole days between the date of death and the date the
death first appears in the official count; a death reported on the day it
occurred has delay 0.  ``eta[d]`` is the share of eventually-reported deaths
that arrive with delay ``d``, for ``d = 0..max_delay``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

DEFAULT_MAX_DELAY = 42
#: Cumulative reported proportion below which a day is dropped, not inflated.
MIN_REPORTED_FRACTION = 0.05
#: Trailing days never used (too immature to correct).
DROP_LAST_DAYS = 2


@dataclass
class ReportingTriangle:
    """Death counts cross-classified by date of death and reporting delay.

    ``counts[i, d]`` is the number of deaths that occurred on ``dates[i]`` and
    were reported ``d`` days later.  Delays beyond ``max_delay`` are folded
    into the last column.  ``as_of`` is the last report date covered.
    """

    dates: pd.DatetimeIndex
    counts: np.ndarray
    as_of: pd.Timestamp

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != len(self.dates):
            raise ValueError("counts must be (n_dates, max_delay + 1)")
        if np.any(self.counts < 0):
            raise ValueError("triangle counts must be non-negative")

    @property
    def max_delay(self) -> int:
        return self.counts.shape[1] - 1

    def fully_observed(self) -> np.ndarray:
        """Mask of death dates whose every delay up to ``max_delay`` is observable."""
        age = (self.as_of - self.dates).days.to_numpy()
        return age >= self.max_delay

    @classmethod
    def from_records(
        cls, records: pd.DataFrame, max_delay: int = DEFAULT_MAX_DELAY, as_of=None
    ) -> "ReportingTriangle":
        df = records.copy()
        df["death_date"] = pd.to_datetime(df["death_date"], format="ISO8601")
        df["report_date"] = pd.to_datetime(df["report_date"], format="ISO8601")
        delay = (df["report_date"] - df["death_date"]).dt.days
        if (delay < 0).any():
            raise ValueError("report_date precedes death_date")
        if (df["count"] < 0).any():
            raise ValueError("triangle counts must be non-negative")
        df["delay"] = np.minimum(delay, max_delay)
        as_of = pd.Timestamp(as_of) if as_of is not None else df["report_date"].max()
        dates = pd.date_range(df["death_date"].min(), df["death_date"].max(), freq="D")
        table = (
            df.groupby(["death_date", "delay"])["count"].sum()
            .unstack(fill_value=0)
            .reindex(index=dates, columns=range(max_delay + 1), fill_value=0)
        )
        return cls(dates=dates, counts=table.to_numpy(), as_of=as_of)

    @classmethod
    def from_csv(cls, path, max_delay: int = DEFAULT_MAX_DELAY, as_of=None):
        df = pd.read_csv(path, dtype={"death_date": str, "report_date": str})
        missing = {"death_date", "report_date", "count"} - set(df.columns)
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        if df.empty:
            raise ValueError(f"{path}: empty reporting triangle")
        return cls.from_records(df, max_delay=max_delay, as_of=as_of)

    def to_csv(self, path) -> None:
        rows = []
        for i, date in enumerate(self.dates):
            for d in np.flatnonzero(self.counts[i]):
                rows.append((date + pd.Timedelta(days=int(d)), date, self.counts[i, d]))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["death_date", "report_date", "count"])
            for report, death, n in rows:
                w.writerow([death.date().isoformat(), report.date().isoformat(), int(n)])


@dataclass(frozen=True)
class DelayProfile:
    """Empirical reporting proportions plus the Gamma hyper-prior on concentration."""

    eta: np.ndarray
    alpha_shape: float = 100.0
    alpha_rate: float = 1.0
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=np.float64)
        if eta.ndim != 1 or eta.size < 1 or np.any(eta < 0):
            raise ValueError("eta must be a non-empty, non-negative vector")
        if abs(eta.sum() - 1.0) > 1e-9:
            raise ValueError("eta must sum to 1")
        object.__setattr__(self, "eta", eta)

    @property
    def max_delay(self) -> int:
        return self.eta.size - 1

    def cumulative(self) -> np.ndarray:
        return np.minimum(np.cumsum(self.eta), 1.0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["delay_days", "eta", "cumulative"])
            for d, (e, c) in enumerate(zip(self.eta, self.cumulative())):
                w.writerow([d, repr(float(e)), repr(float(c))])

    @classmethod
    def from_csv(cls, path) -> "DelayProfile":
        df = pd.read_csv(path)
        if list(df["delay_days"]) != list(range(len(df))):
            raise ValueError(f"{path}: delay_days must run 0..k")
        eta = df["eta"].to_numpy(dtype=float)
        return cls(eta / eta.sum())

    @classmethod
    def immediate(cls) -> "DelayProfile":
        """Profile with every death reported on the day it occurred."""
        return cls(np.array([1.0]))


def estimate_eta(triangle: ReportingTriangle) -> DelayProfile:
    """Pool fully observed death dates into empirical delay proportions."""
    if triangle.counts.size == 0 or triangle.counts.sum() == 0:
        raise ValueError("reporting triangle is empty")
    complete = triangle.fully_observed()
    if not complete.any():
        raise ValueError(
            f"no death date is fully observed (needs {triangle.max_delay} days of reports)"
        )
    totals = triangle.counts[complete].sum(axis=0).astype(np.float64)
    if totals.sum() == 0:
        raise ValueError("fully observed death dates contain no deaths")
    return DelayProfile(totals / totals.sum(), extra={"n_dates": int(complete.sum())})


def sample_delay_proportions(
    profile: DelayProfile, rng: np.random.Generator, alpha: float | None = None
) -> np.ndarray:
    """Draw ``p ~ Dirichlet(alpha * eta)`` with ``alpha ~ Gamma(shape, rate)``.

    Pass ``alpha`` to condition on a fixed concentration.  Delays with
    ``eta == 0`` get ``p == 0``.
    """
    if alpha is None:
        alpha = rng.gamma(profile.alpha_shape, 1.0 / profile.alpha_rate)
    p = np.zeros_like(profile.eta)
    pos = profile.eta > 0
    if pos.sum() == 1:
        p[pos] = 1.0
        return p
    draw = rng.dirichlet(alpha * profile.eta[pos])
    p[pos] = draw / draw.sum()
    return p


def reported_fraction_by_day(cumulative: np.ndarray, n_days: int) -> np.ndarray:
    """Cumulative reported proportion for each of ``n_days`` ending at the as-of day.

    The last day has age 0 and gets ``cumulative[0]``; days older than the
    profile are fully reported.
    """
    age = np.arange(n_days - 1, -1, -1)
    cum = np.asarray(cumulative, dtype=np.float64)
    return np.where(age < cum.size, cum[np.minimum(age, cum.size - 1)], 1.0)


def adjust_death_series(
    raw_deaths, cumulative, floor: float = MIN_REPORTED_FRACTION
) -> np.ndarray:
    """Inflate immature death counts by their cumulative reported proportion.

    ``cumulative[a]`` is the share of deaths reported within ``a`` days, so a
    day ``a`` days before the final date is divided by ``cumulative[a]``.
    The final two days are dropped; days with a proportion below ``floor``
    come back as NaN.
    """
    raw = np.asarray(raw_deaths, dtype=np.float64)
    if np.any(raw < 0):
        raise ValueError("raw deaths must be non-negative")
    cum = np.asarray(cumulative, dtype=np.float64)
    if np.any(cum < 0) or np.any(cum > 1 + 1e-12):
        raise ValueError("cumulative proportions must lie in [0, 1]")
    frac = reported_fraction_by_day(cum, raw.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        adjusted = np.where(frac >= floor, raw / frac, np.nan)
    return adjusted[: max(raw.size - DROP_LAST_DAYS, 0)]
