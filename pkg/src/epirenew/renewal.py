"""Deterministic forward model: renewal recursion and mobility-driven Rt."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import expit

from .delaydist import DiscretePmf

N_COVARIATES = 4
#: Days at the start of the modelled window filled by the seed magnitude.
SEED_DAYS = 6


@dataclass(frozen=True)
class MobilityMatrix:
    """Smoothed mobility indicators and post-June dummies, shape (4, T)."""

    indicators: np.ndarray
    dummies: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.indicators, dtype=np.float64)
        z = np.asarray(self.dummies, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != N_COVARIATES:
            raise ValueError(f"indicators must have shape ({N_COVARIATES}, T)")
        if z.shape != x.shape:
            raise ValueError("dummies must match the indicator shape")
        if not np.all((z == 0) | (z == 1)):
            raise ValueError("dummies must be 0/1")
        object.__setattr__(self, "indicators", x)
        object.__setattr__(self, "dummies", z)

    @property
    def days(self) -> int:
        return self.indicators.shape[1]

    def window(self, start: int, stop: int | None = None) -> "MobilityMatrix":
        return MobilityMatrix(self.indicators[:, start:stop], self.dummies[:, start:stop])


@dataclass(frozen=True)
class RtParams:
    r0: float
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        if not self.r0 > 0:
            raise ValueError("r0 must be positive")
        for name in ("alpha", "beta", "gamma"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(N_COVARIATES)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class InfectionSeries:
    """Daily new infections ``c`` and susceptible fractions ``s``."""

    c: np.ndarray
    s: np.ndarray
    population: float

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.c)


def rt_link(params: RtParams, x, z) -> np.ndarray | float:
    """Reproduction number ``R0 * 2 * logistic(u)``.

    ``u = -sum_k[(alpha_k + beta_k) x_k + gamma_k z_k]``.  ``x`` and ``z``
    are length-4 vectors for one day or (4, T) arrays for a series.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    u = -((params.alpha + params.beta) @ x + params.gamma @ z)
    r = params.r0 * 2.0 * expit(u)
    return float(r) if np.ndim(r) == 0 else r


def susceptible_fraction(history, population: float) -> float:
    return max(0.0, 1.0 - float(np.sum(history)) / population)


def renewal_step(history, g: DiscretePmf, rt: float, population: float) -> float:
    """New infections on day ``t`` given ``c_1..c_{t-1}``.

    ``c_t = S_t * R_t * sum_{tau<t} c_tau g_{t-tau}``, clamped so that the
    cumulative total never exceeds the population.
    """
    c = np.asarray(history, dtype=np.float64)
    t = c.size + 1
    if t < 2:
        raise ValueError("need at least one day of history")
    lags = np.arange(t - 1, 0, -1)  # t - tau for tau = 1..t-1
    w = np.where(lags <= g.horizon, g.mass[np.minimum(lags, g.horizon) - 1], 0.0)
    total = float(c.sum())
    new = susceptible_fraction(c, population) * rt * float(np.dot(c, w))
    return min(new, max(population - total, 0.0))


@numba.njit(cache=True)
def _renewal_kernel(seed, n_seed, g, rt, population):
    T = rt.size
    c = np.zeros(T)
    s = np.ones(T)
    total = 0.0
    H = g.size
    for t in range(T):
        s[t] = max(0.0, 1.0 - total / population)
        if t < n_seed:
            new = min(seed, max(population - total, 0.0))
        else:
            acc = 0.0
            lo = max(0, t - H)
            for tau in range(lo, t):
                acc += c[tau] * g[t - tau - 1]
            new = min(s[t] * rt[t] * acc, max(population - total, 0.0))
        c[t] = new
        total += new
    return c, s


def simulate_state(
    seed: float,
    days: int,
    g: DiscretePmf,
    rt_series,
    population: float,
    n_seed: int = SEED_DAYS,
) -> InfectionSeries:
    """Run the renewal recursion over ``days`` days.

    Days ``1..n_seed`` receive ``seed`` infections each; later days follow
    :func:`renewal_step` with ``rt_series[t]``.
    """
    rt = np.ascontiguousarray(rt_series, dtype=np.float64)
    if days < n_seed:
        raise ValueError(f"window of {days} days is shorter than the {n_seed}-day seed")
    if rt.shape != (days,):
        raise ValueError(f"rt_series must have length {days}")
    if seed < 0 or population <= 0:
        raise ValueError("seed must be >= 0 and population > 0")
    c, s = _renewal_kernel(float(seed), int(n_seed), g.mass, rt, float(population))
    return InfectionSeries(c=c, s=s, population=float(population))
