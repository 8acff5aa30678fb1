"""Gamma delay distributions and their daily discretization.

Gamma parameters throughout this package are given as ``(mean, cv)``, the
mean in days and the coefficient of variation.  A ``GammaSpec(6.5, 0.62)``
therefore has shape ``1 / 0.62**2`` and rate ``shape / 6.5``; it is *not*
a (shape, scale) or (shape, rate) pair.

Daily bins follow the usual renewal-model convention: day 1 collects the
interval ``[0, 1.5]`` and day ``s >= 2`` collects ``[s - 0.5, s + 0.5]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

#: Maximum probability mass allowed beyond the horizon before renormalizing.
MAX_TAIL_MASS = 0.01

#: Sub-day grid step (days) used by :func:`convolve_infection_to_death`.
CONVOLUTION_STEP = 0.05


class TruncationError(ValueError):
    """Raised when a horizon is too short to hold 99% of a distribution."""


@dataclass(frozen=True)
class GammaSpec:
    """Gamma distribution parameterized by mean (days) and coefficient of variation."""

    mean: float
    cv: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and self.mean > 0):
            raise ValueError(f"mean must be positive and finite, got {self.mean}")
        if not (math.isfinite(self.cv) and self.cv > 0):
            raise ValueError(f"cv must be positive and finite, got {self.cv}")

    @property
    def shape(self) -> float:
        return 1.0 / self.cv**2

    @property
    def rate(self) -> float:
        return self.shape / self.mean


# Delay distributions used by the model.
INFECTION_TO_ONSET = GammaSpec(5.1, 0.86)
ONSET_TO_DEATH = GammaSpec(18.8, 0.45)
SERIAL_INTERVAL = GammaSpec(6.5, 0.62)


@dataclass(frozen=True)
class DiscretePmf:
    """Probability mass over days ``1..horizon``.

    ``mass[0]`` is the probability of a one-day delay, ``mass[s - 1]`` the
    probability of an ``s``-day delay.
    """

    mass: np.ndarray

    def __post_init__(self):
        mass = np.ascontiguousarray(self.mass, dtype=np.float64)
        if mass.ndim != 1 or mass.size < 1:
            raise ValueError("mass must be a non-empty 1-D array")
        if np.any(~np.isfinite(mass)) or np.any(mass < 0):
            raise ValueError("mass entries must be finite and non-negative")
        if abs(mass.sum() - 1.0) > 1e-9:
            raise ValueError(f"mass must sum to 1, got {mass.sum():.12g}")
        mass.setflags(write=False)
        object.__setattr__(self, "mass", mass)

    @property
    def horizon(self) -> int:
        return self.mass.size

    @property
    def days(self) -> np.ndarray:
        return np.arange(1, self.horizon + 1)

    def mean(self) -> float:
        return float(np.dot(self.days, self.mass))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["day", "mass"])
            for day, m in zip(self.days, self.mass):
                writer.writerow([int(day), repr(float(m))])

    @classmethod
    def from_csv(cls, path: str | Path) -> "DiscretePmf":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        days = [int(r["day"]) for r in rows]
        if days != list(range(1, len(days) + 1)):
            raise ValueError(f"{path}: days must run 1..T without gaps")
        return cls(np.array([float(r["mass"]) for r in rows]))


def gamma_cdf(spec: GammaSpec, x) -> np.ndarray | float:
    """P(X <= x) for ``X ~ Gamma(spec)``; accepts scalars or arrays."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(arr)):
        raise ValueError("x must be finite")
    if np.any(arr < 0):
        raise ValueError("x must be non-negative")
    out = special.gammainc(spec.shape, spec.rate * arr)
    return float(out) if out.ndim == 0 else out


def _day_edges(horizon: int) -> np.ndarray:
    edges = np.arange(horizon + 1, dtype=np.float64) + 0.5
    edges[0] = 0.0
    return edges


def interval_masses(spec: GammaSpec, horizon: int) -> np.ndarray:
    """Un-normalized daily bin masses for days ``1..horizon``."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return np.diff(gamma_cdf(spec, _day_edges(horizon)))


def _normalized(raw: np.ndarray, what: str) -> DiscretePmf:
    tail = 1.0 - raw.sum()
    if tail >= MAX_TAIL_MASS:
        raise TruncationError(
            f"{what}: horizon {raw.size} leaves {tail:.3%} of the mass beyond it "
            f"(limit {MAX_TAIL_MASS:.0%})"
        )
    return DiscretePmf(raw / raw.sum())


def discretize(spec: GammaSpec, horizon: int) -> DiscretePmf:
    """Daily pmf of a Gamma delay, truncated at ``horizon`` and renormalized.

    Raises
    ------
    TruncationError
        If 1% or more of the mass lies beyond ``horizon + 0.5`` days.
    """
    return _normalized(interval_masses(spec, horizon), f"Gamma{spec.mean, spec.cv}")


def _grid_masses(spec: GammaSpec, n: int, step: float) -> np.ndarray:
    return np.diff(gamma_cdf(spec, np.arange(n + 1) * step))


def convolution_masses(
    first: GammaSpec, second: GammaSpec, horizon: int, step: float = CONVOLUTION_STEP
) -> np.ndarray:
    """Un-normalized daily masses of ``X + Y`` for independent Gammas.

    Each density is replaced by its exact cell masses on a grid of width
    ``step``; the sum of two uniform cells is a triangle centred on a grid
    point, so a triangle centred exactly on a day boundary is split in half.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    per_day = round(1.0 / step)
    if not math.isclose(per_day * step, 1.0) or per_day % 2:
        raise ValueError("step must divide half a day evenly")
    n = (horizon + 1) * per_day
    summed = np.convolve(_grid_masses(first, n, step), _grid_masses(second, n, step))
    # Triangle for pair-index k is centred at (k + 1) * step.
    q = np.arange(1, summed.size + 1)
    half = per_day // 2
    day = (q + half) // per_day
    on_edge = (q + half) % per_day == 0
    out = np.zeros(horizon + 2)
    keep = day <= horizon + 1
    np.add.at(out, day[keep], np.where(on_edge[keep], 0.5, 1.0) * summed[keep])
    edge = on_edge & (day - 1 <= horizon + 1)
    np.add.at(out, day[edge] - 1, 0.5 * summed[edge])
    out[1] += out[0]  # [0, 0.5) belongs to day 1
    return out[1 : horizon + 1]


def convolve_infection_to_death(
    onset: GammaSpec = INFECTION_TO_ONSET,
    death: GammaSpec = ONSET_TO_DEATH,
    horizon: int = 120,
) -> DiscretePmf:
    """Daily pmf of infection-to-death time, the sum of two Gamma delays."""
    raw = convolution_masses(onset, death, horizon)
    return _normalized(raw, "infection-to-death")
