"""Static figures for fitted states, drawn straight from the band tables.

Figures are built on a bare ``Figure`` with the Agg canvas, so nothing
touches pyplot's global state, and PNGs are written without the software
stamp so reruns produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np
import pandas as pd
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {
    "font.size": 9,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "xtick.major.width": 0.6,
    "ytick.major.width": 0.6,
    "legend.frameon": False,
    "savefig.dpi": 120,
}

# (outer 95% band, inner 50% band, median line)
PALETTES = {
    "infections": ("#c6dbef", "#6baed6", "#08519c"),
    "deaths": ("#c7e9c0", "#74c476", "#006d2c"),
    "reported_deaths": ("#c7e9c0", "#74c476", "#006d2c"),
    "rt": ("#fdd0a2", "#fd8d3c", "#a63603"),
}


def band_axes(ax, dates, band: pd.DataFrame, palette, label: str) -> None:
    outer, inner, line = palette
    ax.fill_between(dates, band["q2.5"], band["q97.5"], color=outer, lw=0, label="95% CI")
    ax.fill_between(dates, band["q25"], band["q75"], color=inner, lw=0, label="50% CI")
    ax.plot(dates, band["q50"], color=line, lw=1.0, label=label)


def plot_state(state, bands: dict[str, pd.DataFrame], path) -> Path:
    """Three stacked panels: infections, reported deaths against data, and Rt."""
    path = Path(path)
    dates = pd.DatetimeIndex(state.dates).to_pydatetime()
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(6.5, 7.0))
        FigureCanvasAgg(fig)
        ax_inf, ax_dead, ax_rt = fig.subplots(3, 1, sharex=True)

        band_axes(ax_inf, dates, bands["infections"], PALETTES["infections"], "median")
        ax_inf.set_ylabel("daily infections")

        band_axes(ax_dead, dates, bands["reported_deaths"], PALETTES["reported_deaths"],
                  "expected reported")
        ax_dead.bar(dates, state.deaths, width=0.8, color="0.55", label="observed")
        if 0 < state.fit_start < state.days:
            ax_dead.axvline(dates[state.fit_start], color="0.3", lw=0.6, ls=":")
        ax_dead.set_ylabel("daily deaths")
        ax_dead.legend(loc="upper left", fontsize=7)

        band_axes(ax_rt, dates, bands["rt"], PALETTES["rt"], "median")
        ax_rt.axhline(1.0, color="0.2", lw=0.6, ls="--")
        ax_rt.set_ylabel("$R_t$")
        ax_rt.set_ylim(bottom=0.0, top=max(1.5, float(np.nanmax(bands["rt"]["q97.5"])) * 1.05))

        fig.suptitle(state.name)
        fig.autofmt_xdate()
        fig.tight_layout()
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="png", metadata={"Software": None})
    return path
