"""Forward simulation of synthetic death data under known parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .delaydist import DiscretePmf
from .ingest import RELAXATION_DATE, smooth_mobility
from .nowcast import DelayProfile, ReportingTriangle, reported_fraction_by_day
from .observation import expected_deaths, nb_size
from .renewal import N_COVARIATES, SEED_DAYS, RtParams, rt_link, simulate_state


@dataclass
class TrueParams:
    """Ground truth for one synthetic dataset.

    Per-state quantities are dicts keyed by state name; ``beta`` and
    ``gamma`` map a state to its four effects.  ``phi = inf`` gives
    Poisson counts.
    """

    r0: dict[str, float]
    alpha: list[float]
    beta: dict[str, list[float]]
    gamma: dict[str, list[float]]
    seed: dict[str, float]
    psi: dict[str, float]
    phi: float
    ifr_noise: dict[str, float] = field(default_factory=dict)
    dispersion_form: str = "linear"

    @classmethod
    def from_mapping(cls, raw: dict, states: list[str]) -> "TrueParams":
        """Build from a mapping where scalars broadcast to every state."""
        def per_state(key, default=None):
            v = raw.get(key, default)
            if v is None:
                raise ValueError(f"truth is missing {key!r}")
            if isinstance(v, dict):
                missing = set(states) - set(v)
                if missing:
                    raise ValueError(f"truth {key!r} lacks states {sorted(missing)}")
                return {s: v[s] for s in states}
            return {s: v for s in states}

        zeros = [0.0] * N_COVARIATES
        truth = cls(
            r0={k: float(v) for k, v in per_state("r0").items()},
            alpha=[float(a) for a in raw.get("alpha", zeros)],
            beta={k: [float(b) for b in v] for k, v in per_state("beta", zeros).items()},
            gamma={k: [float(b) for b in v] for k, v in per_state("gamma", zeros).items()},
            seed={k: float(v) for k, v in per_state("seed", 30.0).items()},
            psi={k: float(v) for k, v in per_state("psi").items()},
            phi=float(raw.get("phi", math.inf)),
            ifr_noise={k: float(v) for k, v in per_state("ifr_noise", 1.0).items()},
            dispersion_form=raw.get("dispersion_form", "linear"),
        )
        truth.validate()
        return truth

    def validate(self) -> None:
        if len(self.alpha) != N_COVARIATES:
            raise ValueError(f"alpha needs {N_COVARIATES} entries")
        for s in self.r0:
            if not self.r0[s] > 0:
                raise ValueError(f"r0 for {s} must be positive")
            if not 0 < self.psi[s] <= 1:
                raise ValueError(f"psi for {s} must lie in (0, 1]")
            if self.seed[s] < 0:
                raise ValueError(f"seed for {s} must be non-negative")
            if len(self.beta[s]) != N_COVARIATES or len(self.gamma[s]) != N_COVARIATES:
                raise ValueError(f"beta/gamma for {s} need {N_COVARIATES} entries")
            if not self.ifr_noise[s] > 0:
                raise ValueError(f"ifr_noise for {s} must be positive")
        if not self.phi > 0:
            raise ValueError("phi must be positive")

    def to_dict(self) -> dict:
        return {
            "r0": self.r0, "alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
            "seed": self.seed, "psi": self.psi,
            "phi": self.phi if math.isfinite(self.phi) else "inf",
            "ifr_noise": self.ifr_noise, "dispersion_form": self.dispersion_form,
        }


@dataclass
class SyntheticState:
    infections: np.ndarray
    rt: np.ndarray
    expected_deaths: np.ndarray
    expected_reported: np.ndarray
    observed: np.ndarray


def draw_negbin(rng: np.random.Generator, mean: np.ndarray, phi: float,
                form: str = "linear") -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    out = np.zeros(mean.shape, dtype=np.int64)
    pos = mean > 0
    if not math.isfinite(phi):
        out[pos] = rng.poisson(mean[pos])
        return out
    r = nb_size(mean[pos], phi, form)
    out[pos] = rng.negative_binomial(r, r / (r + mean[pos]))
    return out


def synthetic_mobility(dates: pd.DatetimeIndex, lockdown_day: int = 35,
                       relaxation_date=RELAXATION_DATE, rng=None) -> pd.DataFrame:
    """Stylized raw indicators: k1 ramps up at lockdown and eases from the relaxation date.

    k2..k4 carry small independent noise.
    """
    t = np.arange(len(dates), dtype=float)
    ramp = 2.0 / (1.0 + np.exp(-(t - lockdown_day) / 3.0))
    after = np.asarray(dates >= pd.Timestamp(relaxation_date), dtype=float)
    days_after = np.cumsum(after)
    k1 = ramp - 0.4 * (1 - np.exp(-days_after / 10.0)) * after
    rng = rng if rng is not None else np.random.default_rng(0)
    noise = 0.1 * rng.standard_normal((len(dates), N_COVARIATES - 1))
    data = np.column_stack([k1, noise])
    return pd.DataFrame(data, index=dates, columns=[f"k{k + 1}" for k in range(N_COVARIATES)])


def simulate_state_deaths(
    truth: TrueParams, state: str, population: int, ifr: float, mobility_raw: pd.DataFrame,
    g: DiscretePmf, pi: DiscretePmf, cumulative_reported: np.ndarray, rng: np.random.Generator,
    relaxation_date=RELAXATION_DATE,
) -> SyntheticState:
    """Simulate one state over the full mobility date range (seeded on day 1)."""
    mob = smooth_mobility(mobility_raw, relaxation_date=relaxation_date)
    params = RtParams(truth.r0[state], np.array(truth.alpha), np.array(truth.beta[state]),
                      np.array(truth.gamma[state]))
    rt = rt_link(params, mob.indicators, mob.dummies)
    T = mob.days
    inf = simulate_state(truth.seed[state], T, g, rt, population, n_seed=SEED_DAYS)
    d = expected_deaths(inf, pi, ifr * truth.ifr_noise[state])
    frac = reported_fraction_by_day(cumulative_reported, T)
    mu = truth.psi[state] * frac * d
    observed = draw_negbin(rng, mu, truth.phi, truth.dispersion_form)
    return SyntheticState(inf.c, rt, d, mu, observed)


def split_by_delay(observed: np.ndarray, dates: pd.DatetimeIndex, profile: DelayProfile,
                   rng: np.random.Generator) -> pd.DataFrame:
    """Spread each day's observed count over the delays visible by the last date."""
    eta = profile.eta
    rows = []
    T = len(observed)
    for i, n in enumerate(observed):
        if n == 0:
            continue
        age = T - 1 - i
        w = eta[: min(age, profile.max_delay) + 1]
        if w.sum() <= 0:
            w = np.ones(1)
        counts = rng.multinomial(int(n), w / w.sum())
        for delay in np.flatnonzero(counts):
            rows.append((dates[i], dates[i] + pd.Timedelta(days=int(delay)), int(counts[delay])))
    return pd.DataFrame(rows, columns=["death_date", "report_date", "count"])


def default_delay_profile(max_delay: int = 42) -> DelayProfile:
    """Smooth reporting profile with about 10% reported on the day and ~90% within a month."""
    d = np.arange(max_delay + 1, dtype=float)
    w = np.exp(-d / 8.0)
    w[0] = 0.1 / 0.9 * w[1:].sum()
    return DelayProfile(w / w.sum())


def combine_triangles(records: list[pd.DataFrame], max_delay: int, as_of) -> ReportingTriangle:
    df = pd.concat(records, ignore_index=True)
    df = df.groupby(["death_date", "report_date"], as_index=False)["count"].sum()
    return ReportingTriangle.from_records(df, max_delay=max_delay, as_of=as_of)
