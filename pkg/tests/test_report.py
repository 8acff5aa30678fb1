import json

import numpy as np
import pandas as pd
import pytest

import oracles
from epirenew.hierarchy import sample_prior
from epirenew.report import (
    BAND_COLUMNS, SUMMARY_COLUMNS, active_infections, attack_rate, deaths_per_million,
    emit_report, state_latents, summary_row,
)
from epirenew.sampler import PosteriorDraws


@pytest.fixture(scope="module")
def prior_draws(small_model):
    """Constrained prior draws shaped like a 2-chain fit (enough for schema checks)."""
    lay = small_model.layout
    rng = np.random.default_rng(0)
    vals = np.array([sample_prior(lay, small_model.prior, rng) for _ in range(120)])
    vals[:, lay.slices["seed"]] = np.minimum(vals[:, lay.slices["seed"]], 50)
    return PosteriorDraws(vals.reshape(2, 60, -1), lay.names())


def test_attack_rate_examples():
    assert attack_rate(np.zeros(10), 1000, 9) == 0.0
    assert attack_rate(np.array([1_710_000.0]), 3_606_940, 0) == pytest.approx(47.4, abs=0.1)
    assert attack_rate(np.array([400.0, 600.0]), 1000, 1) == 100.0
    assert attack_rate(np.array([400.0, 900.0]), 1000, 1) == 100.0
    np.testing.assert_allclose(attack_rate(np.ones((3, 5)), 10, 1), [20, 20, 20])
    with pytest.raises(ValueError):
        attack_rate(np.ones(5), 10, 5)


def test_active_infection_window():
    assert active_infections(np.full(20, 10.0), 19) == 140.0
    spike = np.zeros(30)
    spike[29 - 14] = 100.0
    assert active_infections(spike, 29) == 0.0
    spike[29 - 13] = 1.0
    assert active_infections(spike, 29) == 1.0
    with pytest.raises(ValueError):
        active_infections(np.ones(20), 12)


def test_deaths_per_million_examples():
    assert deaths_per_million(6119, 9_025_363) == 678
    assert deaths_per_million(6392, 17_338_220) == 369
    assert deaths_per_million(0, 5) == 0
    with pytest.raises(ValueError):
        deaths_per_million(1, 0)


def test_summary_row_matches_per_draw_oracle(small_model, prior_draws):
    model = small_model
    m = 1
    st = model.states[m]
    lat = state_latents(model, prior_draws, m)
    day = st.days - 1
    row = summary_row(st, lat, day)
    ar, active = [], []
    lay = model.layout
    for flat in prior_draws.flat():
        theta = lay.unpack(flat)
        c = oracles.renewal(float(theta.seed[m]), model.rt(theta, m).tolist(),
                            model.g.mass.tolist(), float(st.population))
        ar.append(min(100.0, 100 * sum(c[:day + 1]) / st.population))
        active.append(sum(c[day - 13:day + 1]) / 1e3)
    lo, mid, hi = np.quantile(ar, [0.025, 0.5, 0.975])
    assert row["attack_rate_percent"] == pytest.approx(mid, rel=1e-9)
    assert row["attack_rate_percent_low"] == pytest.approx(lo, rel=1e-9)
    assert row["attack_rate_percent_high"] == pytest.approx(hi, rel=1e-9)
    assert row["infections_prev_14d_thousands"] == pytest.approx(np.median(active), rel=1e-9)
    assert row["deaths"] == int(st.deaths.sum())
    assert row["deaths_per_million"] == deaths_per_million(row["deaths"], st.population)


def test_emit_report_files_and_schema(small_model, prior_draws, tmp_path):
    diag = {"converged": False, "threshold": 1.05, "flagged": ["r0[A]"]}
    man = emit_report(small_model, prior_draws, tmp_path, diagnostics=diag, seed=3,
                      config={"note": "x"}, figures=True)
    summary = pd.read_csv(tmp_path / "summary.csv")
    assert list(summary.columns) == SUMMARY_COLUMNS
    assert list(summary["state"]) == ["A", "B"]
    for st in small_model.states:
        for q in ("infections", "deaths", "reported_deaths", "rt"):
            band = pd.read_csv(tmp_path / "bands" / f"{st.name}_{q}.csv")
            assert list(band.columns) == BAND_COLUMNS
            assert len(band) == st.days
            q_cols = band[BAND_COLUMNS[3:]].to_numpy()
            assert np.all(np.diff(q_cols, axis=1) >= 0)
        png = tmp_path / "figures" / f"{st.name}.png"
        assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    for key in ("infections_thousands", "infections_prev_14d_thousands", "attack_rate_percent"):
        assert (summary[f"{key}_low"] <= summary[key]).all()
        assert (summary[key] <= summary[f"{key}_high"]).all()
    assert summary["attack_rate_percent_high"].le(100).all()
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["warning"].startswith("NOT CONVERGED") and "r0[A]" in report["warning"]
    assert report["seed"] == 3 and report["config"] == {"note": "x"}
    assert report["n_draws"] == 120 and man["files"]["summary"] == "summary.csv"


def test_emit_report_as_of_and_determinism(small_model, prior_draws, tmp_path):
    st = small_model.states[0]
    as_of = st.dates[60]
    outs = []
    for k in range(2):
        out = tmp_path / str(k)
        emit_report(small_model, prior_draws, out, as_of=as_of, seed=1, figures=False)
        outs.append({p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()})
    assert outs[0] == outs[1]
    summary = pd.read_csv(tmp_path / "0" / "summary.csv")
    assert summary.loc[0, "deaths"] == st.deaths[:61].sum()
    assert json.loads((tmp_path / "0" / "report.json").read_text())["warning"] is None
    with pytest.raises(ValueError):
        emit_report(small_model, prior_draws, tmp_path / "x", as_of="2019-01-01", figures=False)
