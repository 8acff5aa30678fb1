import numpy as np
import pandas as pd
import pytest

from epirenew.ingest import (
    IfrInterpolationTable, IngestError, InsufficientDeathsError, StateData, epidemic_window,
    interpolate_ifr, load_deaths, load_ifr, load_mobility, load_population, load_table1,
    prepare_states, smooth_mobility, write_deaths, write_ifr, write_mobility, write_population,
)
from epirenew.renewal import MobilityMatrix
from epirenew.report import deaths_per_million


def _write(path, text):
    path.write_text(text)
    return path


def test_load_deaths_three_days(tmp_path):
    p = _write(tmp_path / "d.csv", "state,date,deaths\nA,2020-03-01,0\nA,2020-03-02,1\nA,2020-03-03,4\n")
    series, warnings = load_deaths(p)
    assert list(series) == ["A"] and len(series["A"]) == 3 and warnings == []
    assert series["A"].index[0] == pd.Timestamp("2020-03-01")


def test_load_deaths_zero_fills_gaps(tmp_path):
    p = _write(tmp_path / "d.csv", "state,date,deaths\nA,2020-03-01,2\nA,2020-03-03,4\n")
    series, warnings = load_deaths(p)
    np.testing.assert_array_equal(series["A"].to_numpy(), [2, 0, 4])
    assert len(warnings) == 1 and "2020-03-02" in warnings[0]


@pytest.mark.parametrize("body, match", [
    ("state,date,deaths\nA,2020-03-01,-1\n", "negative"),
    ("state,date,deaths\nA,2020-03-02,1\nA,2020-03-01,1\n", "strictly increasing"),
    ("state,date,deaths\nA,2020-03-01,1\nA,2020-03-01,1\n", "strictly increasing"),
    ("state,date,deaths\nA,2020-03-01,1.5\n", "integers"),
    ("state,date,deaths\nA,2020-03-01\n", "malformed"),
    ("state,day,deaths\nA,2020-03-01,1\n", "header"),
    ("state,date,deaths\nA,03/01/2020,1\n", "ISO"),
])
def test_load_deaths_rejects(tmp_path, body, match):
    with pytest.raises(IngestError, match=match):
        load_deaths(_write(tmp_path / "d.csv", body))


def test_missing_file_is_file_not_found(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_deaths(tmp_path / "nope.csv")


def test_other_loaders(tmp_path):
    pop = load_population(_write(tmp_path / "p.csv", "state,population\nA,100\nB,2500\n"))
    assert pop == {"A": 100, "B": 2500}
    ifr = load_ifr(_write(tmp_path / "i.csv", "state,ifr_percent\nA,0.65\n"))
    assert ifr["A"] == pytest.approx(0.0065)
    with pytest.raises(IngestError):
        load_ifr(_write(tmp_path / "i2.csv", "state,ifr_percent\nA,12\n"))
    with pytest.raises(IngestError):
        load_population(_write(tmp_path / "p2.csv", "state,population\nA,0\n"))


def test_mobility_gap_interpolated(tmp_path):
    p = _write(tmp_path / "m.csv", "state,date,k1,k2,k3,k4\n"
               "A,2020-03-01,0,1,2,3\nA,2020-03-03,2,1,2,5\n")
    frames, warnings = load_mobility(p)
    np.testing.assert_allclose(frames["A"].loc["2020-03-02"].to_numpy(), [1, 1, 2, 4])
    assert warnings


def test_round_trip_writers(tmp_path):
    rng = np.random.default_rng(0)
    dates = pd.date_range("2020-03-01", periods=12)
    deaths = {s: pd.Series(rng.integers(0, 9, 12), index=dates) for s in ("A", "B")}
    mob = {s: pd.DataFrame(rng.normal(size=(12, 4)), index=dates, columns=list("abcd"))
           for s in ("A", "B")}
    write_deaths(deaths, tmp_path / "d.csv")
    write_mobility(mob, tmp_path / "m.csv")
    write_population({"A": 10, "B": 20}, tmp_path / "p.csv")
    write_ifr({"A": 0.0065, "B": 0.011}, tmp_path / "i.csv")
    d2, _ = load_deaths(tmp_path / "d.csv")
    m2, _ = load_mobility(tmp_path / "m.csv")
    for s in deaths:
        np.testing.assert_array_equal(d2[s].to_numpy(), deaths[s].to_numpy())
        np.testing.assert_array_equal(m2[s].to_numpy(), mob[s].to_numpy())
    assert load_population(tmp_path / "p.csv") == {"A": 10, "B": 20}
    assert load_ifr(tmp_path / "i.csv") == pytest.approx({"A": 0.0065, "B": 0.011}, rel=1e-15)


def _naive_smooth(x):
    out = np.empty_like(x)
    for t in range(len(x)):
        lo = max(0, t - 6)
        out[t] = sum(x[lo:t + 1]) / (t + 1 - lo)
    return out


def test_smoothing_examples():
    const = np.full((10, 4), 2.5)
    np.testing.assert_allclose(smooth_mobility(const).indicators, 2.5)
    ramp = np.tile(np.arange(1.0, 8.0)[:, None], (1, 4))
    assert smooth_mobility(ramp).indicators[0, 6] == 4.0
    x = np.random.default_rng(3).normal(size=(40, 4))
    got = smooth_mobility(x).indicators
    for k in range(4):
        np.testing.assert_allclose(got[k], _naive_smooth(x[:, k]), rtol=0, atol=1e-14)
    with pytest.raises(ValueError):
        smooth_mobility(np.zeros((0, 4)))


def test_relaxation_dummies():
    dates = pd.date_range("2020-05-30", periods=4)
    frame = pd.DataFrame(np.zeros((4, 4)), index=dates)
    z = smooth_mobility(frame).dummies
    np.testing.assert_array_equal(z[0], [0, 0, 1, 1])
    assert (z == z[0]).all()


@pytest.mark.parametrize("deaths, want", [
    ([0, 0, 10, 1, 1], (0, 3)),
    ([5, 5, 0, 0], (0, 2)),
    ([0] * 40 + [10], (11, 41)),
])
def test_epidemic_window_examples(deaths, want):
    assert epidemic_window(deaths) == want


def test_epidemic_window_never_reached():
    with pytest.raises(InsufficientDeathsError):
        epidemic_window(np.zeros(50))


def test_prepare_states_cuts_window_and_excludes():
    dates = pd.date_range("2020-03-01", periods=60)
    d_a = np.zeros(60, dtype=int)
    d_a[45:] = 3
    deaths = {"A": pd.Series(d_a, index=dates), "B": pd.Series(np.zeros(60, dtype=int), index=dates)}
    mob = {s: pd.DataFrame(np.arange(240.0).reshape(60, 4), index=dates) for s in deaths}
    states, notices = prepare_states(deaths, mob, {"A": 1000, "B": 1000}, {"A": 0.01, "B": 0.01})
    assert [s.name for s in states] == ["A"]
    assert any("B: excluded" in n for n in notices)
    st = states[0]
    # cumulative reaches 10 on index 48, fit starts on 49, window 30 days earlier
    assert (st.window_start, st.fit_start, st.days) == (19, 30, 41)
    full = smooth_mobility(mob["A"]).indicators
    np.testing.assert_array_equal(st.mobility.indicators, full[:, 19:])
    with pytest.raises(IngestError, match="missing from population"):
        prepare_states(deaths, mob, {}, {"A": 0.01})


def test_state_data_validation():
    dates = pd.date_range("2020-03-01", periods=3)
    mob = MobilityMatrix(np.zeros((4, 3)), np.zeros((4, 3)))
    ok = dict(name="A", population=10, dates=dates, deaths=[0, 1, 2], mobility=mob, ifr=0.01,
              fit_start=1)
    StateData(**ok)
    for bad in ({"population": 0}, {"deaths": [0, -1, 2]}, {"ifr": 0.2}, {"fit_start": 5},
                {"deaths": [0, 1]}):
        with pytest.raises(IngestError):
            StateData(**(ok | bad))


def test_ifr_interpolation_anchors_and_midpoint():
    tab = IfrInterpolationTable()
    assert interpolate_ifr(tab, "very low") == 0.65
    assert interpolate_ifr(tab, "very high") == 1.10
    assert interpolate_ifr(tab, "medium") == pytest.approx((0.65 + 1.10) / 2)
    assert interpolate_ifr(tab, "medium", age_weights=[1, 1, 1]) == pytest.approx(0.875)
    with pytest.raises(ValueError):
        interpolate_ifr(tab, "extreme")


def test_ifr_age_weighting():
    tab = IfrInterpolationTable(age_relative_risk=(0.5, 1.0, 1.5))
    assert interpolate_ifr(tab, "very low", age_weights=[0, 0, 1]) == pytest.approx(0.65 * 1.5)


def test_table1_fixture():
    tab = load_table1()
    assert len(tab) == 32
    assert tab["ifr_percent"].between(0.40, 1.10).all()
    cdmx = tab.set_index("state").loc["Mexico City"]
    oax = tab.set_index("state").loc["Oaxaca"]
    assert cdmx["ifr_percent"] == 0.65 and oax["ifr_percent"] == 1.10
    for d, p, want in zip(tab["deaths"], tab["population"], tab["deaths_per_million"]):
        assert abs(deaths_per_million(d, p) - want) <= 1
    # the state rows are dated July 7; the national 36,906 came a week later
    assert tab["deaths"].sum() == 33381 < 36906
