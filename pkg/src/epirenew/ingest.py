"""Input loading, validation and preprocessing.

CSV schemas (headers are exact, dates ISO-8601)::

    deaths      state,date,deaths
    mobility    state,date,k1,k2,k3,k4
    population  state,population
    ifr         state,ifr_percent
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

from .renewal import N_COVARIATES, MobilityMatrix

logger = logging.getLogger(__name__)

DEATHS_COLUMNS = ["state", "date", "deaths"]
MOBILITY_COLUMNS = ["state", "date"] + [f"k{k + 1}" for k in range(N_COVARIATES)]
POPULATION_COLUMNS = ["state", "population"]
IFR_COLUMNS = ["state", "ifr_percent"]

#: Dummy covariates switch on from this date.
RELAXATION_DATE = pd.Timestamp("2020-06-01")
DEATH_THRESHOLD = 10
#: Days of infection history modelled before the first fitted death.
LEAD_DAYS = 30
SMOOTHING_DAYS = 7
MAX_IFR = 0.10


class IngestError(ValueError):
    """Input data failed validation."""


class InsufficientDeathsError(IngestError):
    """A state never reaches the cumulative-death threshold."""


@dataclass
class StateData:
    """One state's model-ready inputs over its modelled window.

    ``fit_start`` indexes into the window; ``window_start`` indexes into the
    full death series the window was cut from.
    """

    name: str
    population: int
    dates: pd.DatetimeIndex
    deaths: np.ndarray
    mobility: MobilityMatrix
    ifr: float
    fit_start: int
    window_start: int = 0
    notices: list[str] = field(default_factory=list)
    #: deaths recorded before the window opens (counted in reported totals)
    prior_deaths: int = 0

    def __post_init__(self):
        self.deaths = np.asarray(self.deaths, dtype=np.int64)
        if self.population <= 0:
            raise IngestError(f"{self.name}: population must be positive")
        if np.any(self.deaths < 0):
            raise IngestError(f"{self.name}: negative death counts")
        if not 0 < self.ifr < MAX_IFR:
            raise IngestError(f"{self.name}: IFR {self.ifr:.4f} outside (0, {MAX_IFR})")
        T = len(self.dates)
        if self.deaths.size != T or self.mobility.days != T:
            raise IngestError(f"{self.name}: deaths, mobility and dates differ in length")
        if T > 1 and not (np.diff(self.dates.asi8) == 86_400 * 10**9).all():
            raise IngestError(f"{self.name}: dates must be contiguous days")
        if not 0 <= self.fit_start <= T:
            raise IngestError(f"{self.name}: fit_start outside the window")

    @property
    def days(self) -> int:
        return len(self.dates)


def _read_csv(path, columns: list[str], **kw) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    try:
        df = pd.read_csv(path, dtype={"state": str, "date": str},
                         float_precision="round_trip", **kw)
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise IngestError(f"{path}: malformed CSV ({exc})") from exc
    if list(df.columns) != columns:
        raise IngestError(f"{path}: expected header {','.join(columns)}, got {','.join(df.columns)}")
    if df.isna().any().any():
        bad = int(np.flatnonzero(df.isna().any(axis=1).to_numpy())[0]) + 2
        raise IngestError(f"{path}: malformed row at line {bad}")
    return df


def _parse_dates(df: pd.DataFrame, path) -> pd.DataFrame:
    try:
        df["date"] = pd.to_datetime(df["date"], format="%Y-%m-%d")
    except ValueError as exc:
        raise IngestError(f"{path}: dates must be ISO-8601 ({exc})") from exc
    return df


def _check_monotone(df: pd.DataFrame, path) -> None:
    for state, group in df.groupby("state", sort=False):
        if not group["date"].is_monotonic_increasing or group["date"].duplicated().any():
            raise IngestError(f"{path}: dates for {state} are not strictly increasing")


def load_deaths(path) -> tuple[dict[str, pd.Series], list[str]]:
    """Daily death series per state, gaps zero-filled.

    Returns the series and a list of warnings describing filled gaps.
    """
    df = _parse_dates(_read_csv(path, DEATHS_COLUMNS), path)
    counts = pd.to_numeric(df["deaths"], errors="coerce")
    if counts.isna().any() or (counts != np.round(counts)).any():
        raise IngestError(f"{path}: death counts must be integers")
    if (counts < 0).any():
        row = int(np.flatnonzero((counts < 0).to_numpy())[0])
        raise IngestError(f"{path}: negative death count for {df['state'].iloc[row]} on "
                          f"{df['date'].iloc[row].date()}")
    df["deaths"] = counts.astype(np.int64)
    _check_monotone(df, path)
    out, warnings = {}, []
    for state, group in df.groupby("state", sort=False):
        s = group.set_index("date")["deaths"]
        full = pd.date_range(s.index[0], s.index[-1], freq="D")
        if len(full) != len(s):
            missing = full.difference(s.index)
            warnings.append(f"{state}: {len(missing)} missing day(s) zero-filled "
                            f"({', '.join(str(d.date()) for d in missing[:5])})")
        out[state] = s.reindex(full, fill_value=0).rename(state)
    return out, warnings


def load_mobility(path) -> tuple[dict[str, pd.DataFrame], list[str]]:
    """Raw mobility indicators per state; interior gaps linearly interpolated."""
    df = _parse_dates(_read_csv(path, MOBILITY_COLUMNS), path)
    _check_monotone(df, path)
    cols = MOBILITY_COLUMNS[2:]
    out, warnings = {}, []
    for state, group in df.groupby("state", sort=False):
        frame = group.set_index("date")[cols].astype(float)
        full = pd.date_range(frame.index[0], frame.index[-1], freq="D")
        if len(full) != len(frame):
            warnings.append(f"{state}: {len(full) - len(frame)} missing mobility day(s) "
                            "linearly interpolated")
            frame = frame.reindex(full).interpolate(method="linear")
        out[state] = frame
    return out, warnings


def load_population(path) -> dict[str, int]:
    df = _read_csv(path, POPULATION_COLUMNS)
    if (df["population"] <= 0).any():
        raise IngestError(f"{path}: populations must be positive")
    return dict(zip(df["state"], df["population"].astype(np.int64).tolist()))


def load_ifr(path) -> dict[str, float]:
    """Per-state IFR as a probability (the file holds percentages)."""
    df = _read_csv(path, IFR_COLUMNS)
    ifr = df["ifr_percent"].astype(float) / 100.0
    bad = (ifr <= 0) | (ifr >= MAX_IFR)
    if bad.any():
        raise IngestError(f"{path}: IFR outside (0%, {MAX_IFR:.0%}) for "
                          f"{', '.join(df['state'][bad])}")
    return dict(zip(df["state"], ifr.tolist()))


def write_deaths(series: dict[str, pd.Series], path) -> None:
    frames = [pd.DataFrame({"state": k, "date": v.index.strftime("%Y-%m-%d"),
                            "deaths": v.to_numpy(dtype=np.int64)}) for k, v in series.items()]
    pd.concat(frames).to_csv(path, index=False, lineterminator="\n")


def write_mobility(frames: dict[str, pd.DataFrame], path) -> None:
    rows = []
    for state, frame in frames.items():
        f = frame.copy()
        f.columns = MOBILITY_COLUMNS[2:]
        f.insert(0, "date", frame.index.strftime("%Y-%m-%d"))
        f.insert(0, "state", state)
        rows.append(f)
    pd.concat(rows).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def write_population(pop: dict[str, int], path) -> None:
    pd.DataFrame({"state": list(pop), "population": list(pop.values())}).to_csv(
        path, index=False, lineterminator="\n")


def write_ifr(ifr: dict[str, float], path) -> None:
    pd.DataFrame({"state": list(ifr), "ifr_percent": [100.0 * v for v in ifr.values()]}).to_csv(
        path, index=False, float_format="%.17g", lineterminator="\n")


def smooth_mobility(raw, dates=None, relaxation_date=RELAXATION_DATE) -> MobilityMatrix:
    """Trailing seven-day mean of each indicator plus post-relaxation dummies.

    ``raw`` is a (T, 4) array or a DataFrame indexed by date.  The first six
    days average whatever days are available.  Without dates, the dummies
    are all zero.
    """
    if isinstance(raw, pd.DataFrame):
        dates = raw.index if dates is None else dates
        raw = raw.to_numpy(dtype=float)
    x = np.asarray(raw, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != N_COVARIATES:
        raise ValueError(f"raw mobility must have shape (T, {N_COVARIATES})")
    if x.shape[0] < 1:
        raise ValueError("need at least one day of mobility data")
    csum = np.cumsum(np.vstack([np.zeros(N_COVARIATES), x]), axis=0)
    t = np.arange(1, x.shape[0] + 1)
    lo = np.maximum(t - SMOOTHING_DAYS, 0)
    smoothed = (csum[t] - csum[lo]) / (t - lo)[:, None]
    if dates is None:
        z = np.zeros_like(x)
    else:
        after = (pd.DatetimeIndex(dates) >= pd.Timestamp(relaxation_date)).astype(float)
        z = np.repeat(after[:, None], N_COVARIATES, axis=1)
    return MobilityMatrix(smoothed.T.copy(), z.T.copy())


def epidemic_window(deaths, threshold: int = DEATH_THRESHOLD,
                    lead_days: int = LEAD_DAYS) -> tuple[int, int]:
    """Zero-based ``(window_start, fit_start)`` for a daily death series.

    ``fit_start`` is the day after cumulative deaths first reach
    ``threshold``; the window opens ``lead_days`` earlier, clamped at 0.
    """
    cum = np.cumsum(np.asarray(deaths))
    hit = np.flatnonzero(cum >= threshold)
    if hit.size == 0:
        raise InsufficientDeathsError(
            f"series never reaches {threshold} cumulative deaths (total {int(cum[-1]) if cum.size else 0})")
    fit_start = int(hit[0]) + 1
    return max(0, fit_start - lead_days), fit_start


def _align_mobility(frame: pd.DataFrame, dates: pd.DatetimeIndex, state: str,
                    notices: list[str]) -> pd.DataFrame:
    span = pd.date_range(min(frame.index[0], dates[0]), max(frame.index[-1], dates[-1]))
    if frame.index[0] > dates[0] or frame.index[-1] < dates[-1]:
        notices.append(f"{state}: mobility does not cover {dates[0].date()}..{dates[-1].date()}; "
                       "edge values carried")
    return frame.reindex(span).ffill().bfill()


def prepare_states(
    deaths: dict[str, pd.Series],
    mobility: dict[str, pd.DataFrame],
    population: dict[str, int],
    ifr: dict[str, float],
    states: list[str] | None = None,
    as_of=None,
    relaxation_date=RELAXATION_DATE,
) -> tuple[list[StateData], list[str]]:
    """Cut each state's modelled window and assemble :class:`StateData`.

    States that never reach the death threshold are skipped with a notice.
    """
    names = list(states) if states is not None else list(deaths)
    out, notices = [], []
    for name in names:
        for table, label in ((deaths, "deaths"), (mobility, "mobility"),
                             (population, "population"), (ifr, "ifr")):
            if name not in table:
                raise IngestError(f"state {name!r} missing from {label} input")
        series = deaths[name]
        if as_of is not None:
            series = series[series.index <= pd.Timestamp(as_of)]
        try:
            window_start, fit_start = epidemic_window(series.to_numpy())
        except InsufficientDeathsError as exc:
            notices.append(f"{name}: excluded, {exc}")
            continue
        state_notices: list[str] = []
        frame = _align_mobility(mobility[name], series.index, name, state_notices)
        smoothed = smooth_mobility(frame, relaxation_date=relaxation_date)
        offset = frame.index.get_loc(series.index[window_start])
        T = len(series) - window_start
        out.append(StateData(
            name=name,
            population=int(population[name]),
            dates=series.index[window_start:],
            deaths=series.to_numpy()[window_start:],
            mobility=smoothed.window(offset, offset + T),
            ifr=float(ifr[name]),
            fit_start=fit_start - window_start,
            window_start=window_start,
            notices=state_notices,
            prior_deaths=int(series.to_numpy()[:window_start].sum()),
        ))
        notices.extend(state_notices)
    return out, notices


# --- IFR interpolation -------------------------------------------------------

MARGINALIZATION_LEVELS = ("very low", "low", "medium", "high", "very high")


@dataclass(frozen=True)
class IfrInterpolationTable:
    """Anchors for interpolating state IFRs across marginalization levels.

    ``anchor_high`` is the IFR (percent) of the least marginalized anchor and
    ``anchor_low`` that of the most marginalized ones.  ``age_relative_risk``
    holds per-age-group IFR multipliers; a state's age weights scale the
    interpolated value by their weighted risk relative to uniform weights.
    """

    anchor_high: float = 0.65
    anchor_low: float = 1.10
    levels: tuple[str, ...] = MARGINALIZATION_LEVELS
    age_relative_risk: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.anchor_high <= 0 or self.anchor_low <= 0:
            raise ValueError("anchors must be positive")
        if len(self.levels) < 2 or len(set(self.levels)) != len(self.levels):
            raise ValueError("levels must be at least two distinct ordered labels")


def interpolate_ifr(table: IfrInterpolationTable, state_level: str,
                    age_weights=None) -> float:
    """IFR (percent) for a marginalization level, optionally age-weighted."""
    if state_level not in table.levels:
        raise ValueError(f"unknown marginalization level {state_level!r}; "
                         f"expected one of {table.levels}")
    frac = table.levels.index(state_level) / (len(table.levels) - 1)
    ifr = table.anchor_high + frac * (table.anchor_low - table.anchor_high)
    if age_weights is None:
        return ifr
    w = np.asarray(age_weights, dtype=float)
    rr = (np.ones_like(w) if table.age_relative_risk is None
          else np.asarray(table.age_relative_risk, dtype=float))
    if w.shape != rr.shape or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("age_weights must be non-negative and match the age groups")
    return ifr * float(np.dot(w, rr) / w.sum()) / float(rr.mean())


def load_table1() -> pd.DataFrame:
    """Bundled per-state reference table (IFR, population, deaths, estimates as of 2020-07-07)."""
    with resources.files("epirenew").joinpath("data/table1.csv").open("r", encoding="utf-8") as fh:
        return pd.read_csv(fh)
