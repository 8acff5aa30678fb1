import json
import math
import shutil
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import yaml

from epirenew.cli import main
from epirenew.delaydist import SERIAL_INTERVAL, convolve_infection_to_death, discretize
from epirenew.pipeline import (
    ManifestError, assemble, load_manifest, parse_manifest, validate,
    write_manifest,
)
from epirenew.synthetic import TrueParams, simulate_state_deaths, synthetic_mobility

DEMO = Path(__file__).resolve().parent.parent / "demo"
QUICK_CHAINS = {"n_chains": 2, "n_warmup": 150, "n_samples": 100, "seed": 4}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """Demo inputs simulated once; returns the generated fit manifest path."""
    root = tmp_path_factory.mktemp("demo")
    for name in ("manifest.yaml", "population.csv", "ifr.csv", "truth.yaml"):
        shutil.copy(DEMO / name, root / name)
    assert main(["simulate", str(root / "manifest.yaml"), "--truth", str(root / "truth.yaml"),
                 "--output", str(root / "data")]) == 0
    return root / "data" / "manifest.yaml"


def _quick_manifest(src: Path, dst: Path, **changes) -> Path:
    raw = yaml.safe_load(src.read_text())
    for key, value in raw["data"].items():
        raw["data"][key] = str((src.parent / value).resolve())
    raw["chains"] = dict(QUICK_CHAINS)
    raw["output"] = str(dst.parent / "out")
    raw.update(changes)
    dst.write_text(yaml.safe_dump(raw))
    return dst


# --- manifest -----------------------------------------------------------------

def test_parse_manifest_defaults_and_paths(tmp_path):
    m = parse_manifest({"data": {"deaths": "d.csv"}, "as_of": "2020-07-07",
                        "model": {"centered": "gamma"}}, tmp_path)
    assert m.data["deaths"] == (tmp_path / "d.csv").resolve()
    assert m.as_of == pd.Timestamp("2020-07-07")
    assert m.model.centered == ("gamma",)
    assert m.chains.n_chains == 4 and m.chains.n_warmup == 1000
    assert m.output == (tmp_path / "results").resolve()
    assert parse_manifest({}, tmp_path).model.centered == ("beta[1]",)


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"data": {"deaths": "d", "weather": "w"}},
    {"model": {"dispersion_form": "cubic"}},
    {"model": {"centered": ["beta[7]"]}},
    {"priors": {"r0_sd": 1}},
    {"chains": {"n_chains": 1}},
    {"states": []},
    {"as_of": "not a date"},
    {"data": {"triangle": "t", "delay_profile": "e"}},
    ["not", "a", "mapping"],
])
def test_parse_manifest_rejects(raw, tmp_path):
    with pytest.raises(ManifestError):
        parse_manifest(raw, tmp_path)


def test_manifest_round_trip(tmp_path):
    m = parse_manifest({"data": {"deaths": "d.csv", "ifr": "i.csv"}, "states": ["A"],
                        "as_of": "2020-05-01", "chains": {"seed": 9},
                        "priors": {"seed_mean": 20}}, tmp_path)
    write_manifest(m, tmp_path / "m.yaml")
    back = load_manifest(tmp_path / "m.yaml")
    assert back.to_dict() == m.to_dict()
    assert yaml.safe_load((tmp_path / "m.yaml").read_text())["data"]["deaths"] == "d.csv"
    over = m.with_overrides(seed=3, chains=2, output=tmp_path / "o")
    assert (over.chains.seed, over.chains.n_chains, over.output) == (3, 2, tmp_path / "o")


# --- simulate -------------------------------------------------------------------

def test_simulate_outputs_and_determinism(dataset, tmp_path):
    root = dataset.parent
    for name in ("deaths", "mobility", "population", "ifr", "triangle"):
        assert (root / f"{name}.csv").exists()
    truth = json.loads((root / "truth.json").read_text())
    assert truth["r0"] == {"A": 3.0, "B": 3.0} and truth["seed"] == {"A": 80.0, "B": 80.0}
    again = tmp_path / "again"
    assert main(["simulate", str(DEMO / "manifest.yaml"), "--truth", str(DEMO / "truth.yaml"),
                 "--output", str(again)]) == 0
    for name in ("deaths.csv", "mobility.csv", "triangle.csv", "truth.json"):
        assert (again / name).read_bytes() == (root / name).read_bytes()
    other = tmp_path / "other"
    main(["simulate", str(DEMO / "manifest.yaml"), "--truth", str(DEMO / "truth.yaml"),
          "--output", str(other), "--seed", "2"])
    assert (other / "deaths.csv").read_bytes() != (root / "deaths.csv").read_bytes()


def test_no_noise_limit_is_poisson_around_expected_deaths():
    dates = pd.date_range("2020-02-15", periods=150)
    truth = TrueParams.from_mapping({"r0": 3.0, "alpha": [1, 0, 0, 0], "psi": 1.0,
                                     "seed": 80.0}, ["A"])
    assert math.isinf(truth.phi)
    g, pi = discretize(SERIAL_INTERVAL, 150), convolve_infection_to_death(horizon=150)
    rng = np.random.default_rng(0)
    sims = [simulate_state_deaths(truth, "A", 5_000_000, 0.01, synthetic_mobility(dates), g, pi,
                                  np.ones(1), rng) for _ in range(200)]
    mu = sims[0].expected_reported
    np.testing.assert_allclose(mu, sims[0].expected_deaths)
    y = np.array([s.observed for s in sims])
    busy = mu > 5
    # mean and variance both equal the expected deaths
    z = (y[:, busy].mean(axis=0) - mu[busy]) / np.sqrt(mu[busy] / 200)
    assert np.abs(z).max() < 4.5
    ratio = y[:, busy].var(axis=0, ddof=1) / mu[busy]
    assert abs(ratio.mean() - 1) < 0.05


def test_cumulative_deaths_track_lagged_infections():
    dates = pd.date_range("2020-02-15", periods=200)
    truth = TrueParams.from_mapping({"r0": 3.0, "alpha": [1, 0, 0, 0], "psi": 1.0,
                                     "seed": 80.0}, ["A"])
    g, pi = discretize(SERIAL_INTERVAL, 200), convolve_infection_to_death(horizon=200)
    sim = simulate_state_deaths(truth, "A", 5_000_000, 0.01, synthetic_mobility(dates), g, pi,
                                np.ones(1), np.random.default_rng(1))
    lag = round(pi.mean())
    for t in (120, 160, 199):
        back = sim.expected_deaths[: t + 1].sum() / 0.01
        assert back == pytest.approx(sim.infections[: t + 1 - lag].sum(), rel=0.05)


def test_simulate_errors(tmp_path):
    bad_truth = tmp_path / "truth.yaml"
    bad_truth.write_text("r0: -1\npsi: 0.5\n")
    assert main(["simulate", str(DEMO / "manifest.yaml"), "--truth", str(bad_truth),
                 "--output", str(tmp_path / "o")]) == 2
    assert main(["simulate", str(DEMO / "manifest.yaml"), "--truth",
                 str(tmp_path / "missing.yaml")]) == 2


# --- validate --------------------------------------------------------------------

def test_validate_all_pass(dataset, capsys):
    assert main(["validate", str(dataset)]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "prior predictive" in out


def test_validate_negative_deaths_row(dataset, tmp_path, capsys):
    deaths = pd.read_csv(dataset.parent / "deaths.csv")
    deaths.loc[40, "deaths"] = -3
    deaths.to_csv(tmp_path / "deaths.csv", index=False)
    m = _quick_manifest(dataset, tmp_path / "m.yaml")
    raw = yaml.safe_load(m.read_text())
    raw["data"]["deaths"] = str(tmp_path / "deaths.csv")
    m.write_text(yaml.safe_dump(raw))
    assert main(["validate", str(m)]) == 2
    out = capsys.readouterr().out
    row = next(line for line in out.splitlines() if line.startswith("deaths file"))
    assert "FAIL" in row and "negative death count" in row


def test_validate_short_horizon_row(dataset, tmp_path):
    m = _quick_manifest(dataset, tmp_path / "m.yaml", model={"horizon": 30})
    checks = {c.name: c for c in validate(load_manifest(m))}
    assert not checks["delay pmfs"].ok and "beyond it" in checks["delay pmfs"].detail


def test_validate_missing_file_and_bad_as_of(dataset, tmp_path):
    raw = yaml.safe_load(_quick_manifest(dataset, tmp_path / "m.yaml").read_text())
    raw["data"]["mobility"] = str(tmp_path / "nope.csv")
    raw["as_of"] = "2030-01-01"
    (tmp_path / "m2.yaml").write_text(yaml.safe_dump(raw))
    checks = {c.name: c for c in validate(load_manifest(tmp_path / "m2.yaml"))}
    assert not checks["mobility file"].ok and "nope.csv" in checks["mobility file"].detail
    assert not checks["as_of within data"].ok


# --- fit / summarize -----------------------------------------------------------

def test_fit_dry_run(dataset, capsys):
    assert main(["fit", str(dataset), "--dry-run"]) == 0
    out = capsys.readouterr().out
    assert "parameters: 33" in out and "A: 150 days" in out and "delay bins" in out


def test_fit_missing_input_names_path(dataset, tmp_path, capsys):
    raw = yaml.safe_load(dataset.read_text())
    raw["data"]["ifr"] = str(tmp_path / "gone.csv")
    raw["data"] = {k: str((dataset.parent / v).resolve()) if k != "ifr" else v
                   for k, v in raw["data"].items()}
    (tmp_path / "m.yaml").write_text(yaml.safe_dump(raw))
    assert main(["fit", str(tmp_path / "m.yaml")]) == 2
    assert "gone.csv" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["fit"])
    assert exc.value.code == 1
    (tmp_path / "m.yaml").write_text("chains: {n_chains: 1}\n")
    assert main(["fit", str(tmp_path / "m.yaml")]) == 1
    (tmp_path / "bad.yaml").write_text("data: [unclosed\n")
    assert main(["validate", str(tmp_path / "bad.yaml")]) == 1


def test_quick_fit_then_summarize(dataset, tmp_path):
    m = _quick_manifest(dataset, tmp_path / "m.yaml")
    out = tmp_path / "out"
    code = main(["fit", str(m), "--allow-nonconverged", "--no-figures"])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["seed"] == 4 and report["n_draws"] == 200
    assert "sampler" in report["diagnostics"]
    assert (out / "draws.csv").exists() and not (out / "figures").exists()
    before = (out / "summary.csv").read_bytes()
    assert main(["summarize", str(m), "--allow-nonconverged"]) == 0
    assert (out / "summary.csv").read_bytes() == before
    assert (out / "figures" / "A.png").exists()
    strict = main(["summarize", str(m)])
    assert strict == (0 if report["converged"] else 3)
    assert main(["summarize", str(m), "--draws", str(tmp_path / "none.csv")]) == 2


def test_fit_reruns_are_identical(dataset, tmp_path):
    outs = []
    for k in range(2):
        m = _quick_manifest(dataset, tmp_path / f"m{k}.yaml", output=str(tmp_path / f"o{k}"))
        main(["fit", str(m), "--allow-nonconverged", "--no-figures", "--chains", "2"])
        outs.append({p.name: p.read_bytes() for p in (tmp_path / f"o{k}").glob("*.csv")})
    assert outs[0] == outs[1] and "draws.csv" in outs[0]


def test_nonconvergence_exit_code(dataset, tmp_path):
    m = _quick_manifest(dataset, tmp_path / "m.yaml",
                        chains={"n_chains": 2, "n_warmup": 100, "n_samples": 100, "seed": 0,
                                "method": "metropolis"})
    assert main(["fit", str(m), "--no-figures"]) == 3
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["converged"] is False and report["warning"].startswith("NOT CONVERGED")


@pytest.mark.slow
def test_full_fit_of_simulated_data_converges(dataset, tmp_path):
    out = tmp_path / "full"
    assert main(["fit", str(dataset), "--output", str(out)]) == 0
    summary = pd.read_csv(out / "summary.csv")
    assert list(summary["state"]) == ["A", "B"]
    report = json.loads((out / "report.json").read_text())
    assert report["converged"] and report["warning"] is None
    asm = assemble(load_manifest(dataset))
    assert asm.model.layout.centered == ["beta[1]"]
