"""Derived per-state quantities and the files a finished fit writes.

Output layout under the report directory::

    summary.csv                    one row per state, columns SUMMARY_COLUMNS
    bands/<state>_<quantity>.csv   one row per modelled day, columns BAND_COLUMNS
    figures/<state>.png            infections, deaths and Rt with 50%/95% bands
    report.json                    config, seed, diagnostics and warning flag

Intervals are posterior credible intervals (2.5% and 97.5% quantiles) and
point estimates are posterior medians.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .sampler import DEFAULT_QUANTILES, PosteriorDraws, summarize

ACTIVE_WINDOW = 14
QUANTITIES = ("infections", "deaths", "reported_deaths", "rt")

SUMMARY_COLUMNS = [
    "state", "ifr_percent", "population", "deaths", "deaths_per_million",
    "infections_thousands", "infections_thousands_low", "infections_thousands_high",
    "infections_prev_14d_thousands", "infections_prev_14d_thousands_low",
    "infections_prev_14d_thousands_high",
    "attack_rate_percent", "attack_rate_percent_low", "attack_rate_percent_high",
]
BAND_COLUMNS = ["date", "day", "mean", "q2.5", "q25", "q50", "q75", "q97.5"]


def attack_rate(infections, population: float, as_of_day: int) -> np.ndarray | float:
    """Percent of the population infected up to and including ``as_of_day``.

    ``infections`` is one series ``(T,)`` or a stack of draws ``(n, T)``;
    days are 0-based.
    """
    c = np.asarray(infections, dtype=np.float64)
    if not 0 <= as_of_day < c.shape[-1]:
        raise ValueError(f"as_of_day {as_of_day} outside a {c.shape[-1]}-day series")
    if population <= 0:
        raise ValueError("population must be positive")
    out = np.clip(100.0 * c[..., : as_of_day + 1].sum(axis=-1) / population, 0.0, 100.0)
    return float(out) if out.ndim == 0 else out


def active_infections(infections, as_of_day: int, window: int = ACTIVE_WINDOW):
    """Infections over the ``window`` days ending at ``as_of_day`` (0-based, inclusive)."""
    c = np.asarray(infections, dtype=np.float64)
    if as_of_day >= c.shape[-1]:
        raise ValueError(f"as_of_day {as_of_day} outside a {c.shape[-1]}-day series")
    if as_of_day < window - 1:
        raise ValueError(f"need {window} days up to as_of_day, only {as_of_day + 1} available")
    out = c[..., as_of_day - window + 1: as_of_day + 1].sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def deaths_per_million(deaths_total: float, population: float) -> int:
    if population <= 0:
        raise ValueError("population must be positive")
    return int(round(1e6 * deaths_total / population))


@dataclass
class StateLatents:
    """Per-draw latent series for one state, each ``(n_draws, T)``."""

    infections: np.ndarray
    deaths: np.ndarray
    reported_deaths: np.ndarray
    rt: np.ndarray

    def get(self, quantity: str) -> np.ndarray:
        return getattr(self, quantity)


def constrained_draws(model, draws: PosteriorDraws) -> PosteriorDraws:
    """Map unconstrained sampler output to named model parameters."""
    lay = model.layout
    vals = np.apply_along_axis(lay.constrain, 2, draws.values)
    return PosteriorDraws(vals, lay.names(), draws.log_density, draws.accept_rate,
                          dict(draws.info))


def state_latents(model, draws: PosteriorDraws, m: int, max_draws: int | None = None) -> StateLatents:
    """Recompute latent series for state ``m`` from constrained draws.

    With ``max_draws`` an evenly spaced subset of the pooled draws is used.
    """
    flat = draws.flat()
    if max_draws is not None and flat.shape[0] > max_draws:
        idx = np.linspace(0, flat.shape[0] - 1, max_draws).round().astype(int)
        flat = flat[idx]
    T = model.states[m].days
    out = {q: np.empty((flat.shape[0], T)) for q in QUANTITIES}
    for i, row in enumerate(flat):
        lat = model.latent(model.layout.unpack(row), m)
        for q in QUANTITIES:
            out[q][i] = lat[q]
    return StateLatents(**out)


def summary_row(state, lat: StateLatents, as_of_day: int) -> dict:
    """One Table-1 style row; ``as_of_day`` indexes the state's window."""
    deaths = int(state.deaths[: as_of_day + 1].sum()) + int(getattr(state, "prior_deaths", 0))
    cum = lat.infections[:, : as_of_day + 1].sum(axis=1) / 1e3
    active = active_infections(lat.infections, as_of_day) / 1e3
    ar = attack_rate(lat.infections, state.population, as_of_day)
    row = {
        "state": state.name,
        "ifr_percent": round(100 * state.ifr, 4),
        "population": int(state.population),
        "deaths": deaths,
        "deaths_per_million": deaths_per_million(deaths, state.population),
    }
    for key, x in (("infections_thousands", cum), ("infections_prev_14d_thousands", active),
                   ("attack_rate_percent", np.atleast_1d(ar))):
        lo, mid, hi = np.quantile(x, [0.025, 0.5, 0.975])
        row[key], row[f"{key}_low"], row[f"{key}_high"] = float(mid), float(lo), float(hi)
    return row


def band_frame(dates, series: np.ndarray) -> pd.DataFrame:
    rows = summarize(series, DEFAULT_QUANTILES)
    df = pd.DataFrame(rows)
    df.insert(0, "day", np.arange(len(rows)))
    df.insert(0, "date", pd.DatetimeIndex(dates).strftime("%Y-%m-%d"))
    return df[BAND_COLUMNS]


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_") or "state"


def _as_of_index(state, as_of) -> int:
    if as_of is None:
        return state.days - 1
    pos = int(state.dates.searchsorted(pd.Timestamp(as_of), side="right")) - 1
    if pos < 0:
        raise ValueError(f"{state.name}: as_of {as_of} precedes the modelled window")
    return pos


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def emit_report(model, draws: PosteriorDraws, output, *, as_of=None, diagnostics=None,
                config=None, seed=None, max_draws: int | None = 1000,
                figures: bool = True) -> dict:
    """Write summary, band CSVs, figures and the JSON manifest.

    ``draws`` must be constrained (see :func:`constrained_draws`).  Returns
    the manifest that was written.
    """
    out = Path(output)
    (out / "bands").mkdir(parents=True, exist_ok=True)
    rows = []
    files = {"summary": "summary.csv", "bands": {}, "figures": {}}
    for m, st in enumerate(model.states):
        lat = state_latents(model, draws, m, max_draws)
        day = _as_of_index(st, as_of)
        rows.append(summary_row(st, lat, day))
        bands = {}
        for q in QUANTITIES:
            df = band_frame(st.dates, lat.get(q))
            rel = f"bands/{_slug(st.name)}_{q}.csv"
            df.to_csv(out / rel, index=False, float_format="%.10g")
            files["bands"].setdefault(st.name, {})[q] = rel
            bands[q] = df
        if figures:
            from .plotting import plot_state

            (out / "figures").mkdir(exist_ok=True)
            rel = f"figures/{_slug(st.name)}.png"
            plot_state(st, bands, out / rel)
            files["figures"][st.name] = rel
    pd.DataFrame(rows, columns=SUMMARY_COLUMNS).to_csv(out / "summary.csv", index=False,
                                                      float_format="%.6g")
    converged = None if diagnostics is None else bool(diagnostics.get("converged"))
    manifest = {
        "seed": seed,
        "as_of": None if as_of is None else str(pd.Timestamp(as_of).date()),
        "states": [s.name for s in model.states],
        "n_draws": int(draws.flat().shape[0]),
        "config": config or {},
        "converged": converged,
        "warning": (None if converged in (None, True) else
                    "NOT CONVERGED: R-hat exceeds {} for {}".format(
                        diagnostics.get("threshold"), ", ".join(diagnostics.get("flagged", [])))),
        "diagnostics": diagnostics,
        "files": files,
    }
    with open(out / "report.json", "w") as fh:
        json.dump(_json_safe(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
