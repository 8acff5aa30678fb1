"""From latent infections to expected and observed deaths.

Two dispersion forms are supported for the negative-binomial likelihood:

``linear``
    variance ``mean + mean / phi`` (size ``mean * phi``).  This is the
    default.
``quadratic``
    variance ``mean + mean**2 / phi`` (size ``phi``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, xlogy

from .delaydist import DiscretePmf
from .nowcast import DROP_LAST_DAYS

DISPERSION_FORMS = ("linear", "quadratic")


@dataclass(frozen=True)
class DeathModelParams:
    ifr: float
    ifr_noise: float
    psi: float
    phi: float

    def __post_init__(self):
        if not 0 < self.ifr * self.ifr_noise < 1:
            raise ValueError("effective IFR must lie in (0, 1)")
        if not 0 < self.psi < 1:
            raise ValueError("psi must lie in (0, 1)")
        if not self.phi > 0:
            raise ValueError("phi must be positive")

    @property
    def ifr_effective(self) -> float:
        return self.ifr * self.ifr_noise


def expected_deaths(infections, pi: DiscretePmf, ifr_effective: float) -> np.ndarray:
    """``d_t = IFR * sum_{tau<t} c_tau * pi_{t-tau}``; ``d_1 = 0``."""
    c = np.asarray(getattr(infections, "c", infections), dtype=np.float64)
    T = c.size
    if pi.horizon < T - 1:
        raise ValueError(f"pi horizon {pi.horizon} is shorter than the {T}-day series")
    d = np.zeros(T)
    if T > 1:
        d[1:] = np.convolve(c, pi.mass[: T - 1])[: T - 1]
    return ifr_effective * d


def apply_reporting_factors(d, psi: float, reported_fraction) -> np.ndarray:
    """Expected *observed* deaths ``psi * P_t * d_t``."""
    return psi * np.asarray(reported_fraction, dtype=np.float64) * np.asarray(d, dtype=np.float64)


def nb_size(mean, phi, form: str = "linear"):
    if form == "linear":
        return np.asarray(mean, dtype=np.float64) * phi
    if form == "quadratic":
        return np.broadcast_to(np.float64(phi), np.shape(mean))
    raise ValueError(f"dispersion form must be one of {DISPERSION_FORMS}, got {form!r}")


def negbin_logpmf(observed, mean, phi: float, form: str = "linear"):
    """Negative-binomial log pmf parameterized by mean and dispersion ``phi``.

    A zero mean gives 0 for a zero count and ``-inf`` otherwise.
    """
    y = np.asarray(observed, dtype=np.float64)
    mu = np.asarray(mean, dtype=np.float64)
    if np.any(y < 0) or np.any(mu < 0):
        raise ValueError("observed counts and means must be non-negative")
    if not phi > 0:
        raise ValueError("phi must be positive")
    y, mu = np.broadcast_arrays(y, mu)
    r = nb_size(mu, phi, form)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (
            gammaln(y + r) - gammaln(r) - gammaln(y + 1.0)
            + r * (np.log(r) - np.log(r + mu))
            + xlogy(y, mu) - xlogy(y, r + mu)
        )
    zero = mu == 0
    if np.any(zero):
        out = np.where(zero, np.where(y == 0, 0.0, -np.inf), out)
    return float(out) if out.ndim == 0 else out


def likelihood_window(n_days: int, fit_start: int) -> slice:
    """Days entering the likelihood: ``fit_start`` up to (not including) the last two."""
    if not 0 <= fit_start <= n_days:
        raise ValueError(f"fit_start {fit_start} outside a {n_days}-day series")
    return slice(fit_start, max(fit_start, n_days - DROP_LAST_DAYS))


def state_loglikelihood(
    observed_deaths, d_obs, phi: float, fit_start: int, form: str = "linear"
) -> float:
    """Sum of negative-binomial log pmfs over the fitted days of one state."""
    y = np.asarray(observed_deaths)
    mu = np.asarray(d_obs, dtype=np.float64)
    if y.shape != mu.shape or y.ndim != 1:
        raise ValueError(f"observed {y.shape} and expected {mu.shape} series are misaligned")
    window = likelihood_window(y.size, fit_start)
    terms = negbin_logpmf(y[window], mu[window], phi, form)
    return float(np.sum(terms))
