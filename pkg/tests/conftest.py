import numpy as np
import pandas as pd
import pytest

from epirenew.delaydist import SERIAL_INTERVAL, convolve_infection_to_death, discretize
from epirenew.hierarchy import HierarchicalModel
from epirenew.ingest import prepare_states
from epirenew.nowcast import estimate_eta, reported_fraction_by_day
from epirenew.synthetic import (
    TrueParams, combine_triangles, default_delay_profile, simulate_state_deaths, split_by_delay,
    synthetic_mobility,
)

TRUTH = {"r0": 3.0, "alpha": [1.0, 0.0, 0.0, 0.0], "psi": 0.5, "phi": 2.0, "seed": 80.0}
POPULATION = {"A": 5_000_000, "B": 8_000_000}
# A seed near the upper range of its Exponential(30) prior and IFRs high
# enough that 10 deaths accrue within 30 days, so the modelled window
# starts on the first simulated day and the fit is well specified.
IFR = {"A": 0.03, "B": 0.024}


def synthetic_problem(rep: int, days: int = 150, centered=("beta[1]",), states=("A", "B")):
    """Two-state synthetic recovery problem; returns ``(model, truth, inputs)``."""
    rng = np.random.default_rng(1000 + rep)
    dates = pd.date_range("2020-02-15", periods=days)
    names = list(states)
    truth = TrueParams.from_mapping(TRUTH, names)
    horizon = max(days, 100)
    g = discretize(SERIAL_INTERVAL, horizon)
    pi = convolve_infection_to_death(horizon=horizon)
    profile = default_delay_profile()
    deaths, mob, records = {}, {}, []
    for i, s in enumerate(names):
        m = synthetic_mobility(dates, rng=rng, lockdown_day=35 + 7 * i)
        sim = simulate_state_deaths(truth, s, POPULATION[s], IFR[s], m, g, pi,
                                    profile.cumulative(), rng)
        deaths[s] = pd.Series(sim.observed, index=dates)
        mob[s] = m
        records.append(split_by_delay(sim.observed, dates, profile, rng))
    eta = estimate_eta(combine_triangles(records, profile.max_delay, dates[-1]))
    sd, _ = prepare_states(deaths, mob, {s: POPULATION[s] for s in names},
                           {s: IFR[s] for s in names})
    fractions = [reported_fraction_by_day(eta.cumulative(), s.days) for s in sd]
    model = HierarchicalModel(sd, pi, g, fractions, centered=centered)
    return model, truth, {"deaths": deaths, "mobility": mob}


@pytest.fixture(scope="session")
def small_model():
    """Short two-state problem for fast likelihood and gradient checks."""
    model, truth, _ = synthetic_problem(7, days=110)
    return model


@pytest.fixture(scope="session")
def pmfs():
    return discretize(SERIAL_INTERVAL, 100), convolve_infection_to_death(horizon=100)
