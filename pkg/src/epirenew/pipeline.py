"""Run manifests and the glue between ingest, model, sampler and report.

A manifest is a YAML (or JSON) mapping; relative paths resolve against the
manifest's own directory::

    data:
      deaths: deaths.csv          # state,date,deaths
      mobility: mobility.csv      # state,date,k1,k2,k3,k4
      population: population.csv  # state,population
      ifr: ifr.csv                # state,ifr_percent
      triangle: triangle.csv      # optional: death_date,report_date,count
      delay_profile: eta.csv      # optional alternative: delay_days,eta[,cumulative]
    states: [A, B]                # optional; default every state in the deaths file
    as_of: 2020-07-13             # optional; last date used and summary date
    model:
      dispersion_form: linear     # or quadratic
      shared_ifr_noise: false
      centered: ["beta[1]"]       # effects sampled centred: beta, gamma or beta[k]
      horizon: null               # pmf length in days; default max(window, 100)
      max_delay: 42               # reporting-delay columns kept from the triangle
    priors: {}                    # PriorSpec overrides
    chains: {}                    # ChainConfig overrides
    output: results
    simulate:                     # only read by the simulate command
      start: 2020-02-15           # used when no mobility file is given
      days: 150
      lockdown_day: 35
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from .delaydist import (
    SERIAL_INTERVAL, DiscretePmf, TruncationError, convolve_infection_to_death, discretize,
)
from .hierarchy import EFFECT_GROUPS, HierarchicalModel, PriorSpec, centered_mask, sample_prior
from .ingest import (
    IngestError, StateData, load_deaths, load_ifr, load_mobility, load_population,
    prepare_states, write_deaths, write_ifr, write_mobility, write_population,
)
from .nowcast import DEFAULT_MAX_DELAY, DelayProfile, ReportingTriangle, estimate_eta, \
    reported_fraction_by_day
from .observation import DISPERSION_FORMS
from .sampler import ChainConfig

MIN_HORIZON = 100
DATA_KEYS = ("deaths", "mobility", "population", "ifr", "triangle", "delay_profile")
REQUIRED_DATA = ("deaths", "mobility", "population", "ifr")
TOP_KEYS = {"data", "states", "as_of", "model", "priors", "chains", "output", "simulate"}
MODEL_KEYS = {"dispersion_form", "shared_ifr_noise", "centered", "horizon", "max_delay"}
SIMULATE_KEYS = {"start", "days", "lockdown_day"}


class ManifestError(ValueError):
    """The manifest itself is malformed (a usage problem, not a data problem)."""


@dataclass(frozen=True)
class ModelOptions:
    dispersion_form: str = "linear"
    shared_ifr_noise: bool = False
    centered: tuple[str, ...] = ("beta[1]",)
    horizon: int | None = None
    max_delay: int = DEFAULT_MAX_DELAY

    def __post_init__(self):
        if self.dispersion_form not in DISPERSION_FORMS:
            raise ManifestError(f"model.dispersion_form must be one of {DISPERSION_FORMS}")
        try:
            centered_mask(self.centered)
        except ValueError as exc:
            raise ManifestError(f"model.centered: {exc}") from exc
        if self.horizon is not None and self.horizon < 2:
            raise ManifestError("model.horizon must be at least 2 days")
        if self.max_delay < 0:
            raise ManifestError("model.max_delay must be non-negative")


@dataclass(frozen=True)
class SimulateOptions:
    start: pd.Timestamp = pd.Timestamp("2020-02-15")
    days: int = 150
    lockdown_day: int = 35


@dataclass
class Manifest:
    """Parsed run manifest with absolute input paths."""

    path: Path | None
    data: dict[str, Path]
    states: list[str] | None = None
    as_of: pd.Timestamp | None = None
    model: ModelOptions = field(default_factory=ModelOptions)
    priors: PriorSpec = field(default_factory=PriorSpec)
    chains: ChainConfig = field(default_factory=ChainConfig)
    output: Path = Path("results")
    simulate: SimulateOptions = field(default_factory=SimulateOptions)

    def missing_files(self) -> list[Path]:
        return [p for p in self.data.values() if not p.exists()]

    def with_overrides(self, *, seed=None, chains=None, output=None) -> "Manifest":
        cfg = self.chains
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if chains is not None:
            cfg = replace(cfg, n_chains=int(chains))
        return replace(self, chains=cfg, output=Path(output) if output else self.output)

    def to_dict(self) -> dict:
        """Plain mapping that :func:`parse_manifest` reads back."""
        out = {
            "data": {k: str(v) for k, v in self.data.items()},
            "model": {
                "dispersion_form": self.model.dispersion_form,
                "shared_ifr_noise": self.model.shared_ifr_noise,
                "centered": list(self.model.centered),
                "horizon": self.model.horizon,
                "max_delay": self.model.max_delay,
            },
            "priors": self.priors.to_dict(),
            "chains": self.chains.to_dict(),
            "output": str(self.output),
        }
        if self.states is not None:
            out["states"] = list(self.states)
        if self.as_of is not None:
            out["as_of"] = str(self.as_of.date())
        return out


def _mapping(raw, where: str) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ManifestError(f"{where} must be a mapping")
    return raw


def _reject_unknown(raw: dict, known: set, where: str) -> None:
    unknown = set(raw) - known
    if unknown:
        raise ManifestError(f"unknown {where} key(s): {sorted(unknown)}")


def parse_manifest(raw: dict, base_dir=".", path=None) -> Manifest:
    """Validate a manifest mapping; paths are resolved against ``base_dir``."""
    raw = _mapping(raw, "manifest")
    _reject_unknown(raw, TOP_KEYS, "top-level")
    base = Path(base_dir)
    data_raw = _mapping(raw.get("data"), "data")
    _reject_unknown(data_raw, set(DATA_KEYS), "data")
    data = {k: (base / str(v)).resolve() for k, v in data_raw.items() if v is not None}
    if "triangle" in data and "delay_profile" in data:
        raise ManifestError("give either data.triangle or data.delay_profile, not both")

    model_raw = dict(_mapping(raw.get("model"), "model"))
    _reject_unknown(model_raw, MODEL_KEYS, "model")
    if "centered" in model_raw:
        cen = model_raw["centered"]
        if isinstance(cen, bool):
            cen = EFFECT_GROUPS if cen else ()
        elif isinstance(cen, str):
            cen = (cen,)
        model_raw["centered"] = tuple(cen or ())
    try:
        model = ModelOptions(**model_raw)
        priors = PriorSpec.from_mapping(_mapping(raw.get("priors"), "priors"))
        chains = ChainConfig.from_mapping(_mapping(raw.get("chains"), "chains"))
    except (TypeError, ValueError) as exc:
        raise ManifestError(str(exc)) from exc

    sim_raw = dict(_mapping(raw.get("simulate"), "simulate"))
    _reject_unknown(sim_raw, SIMULATE_KEYS, "simulate")
    if "start" in sim_raw:
        sim_raw["start"] = pd.Timestamp(str(sim_raw["start"]))
    simulate = SimulateOptions(**sim_raw)

    states = raw.get("states")
    if states is not None and (not isinstance(states, list) or not states):
        raise ManifestError("states must be a non-empty list")
    as_of = raw.get("as_of")
    try:
        as_of = pd.Timestamp(str(as_of)) if as_of is not None else None
    except ValueError as exc:
        raise ManifestError(f"as_of is not a date: {as_of!r}") from exc
    return Manifest(
        path=Path(path) if path else None,
        data=data,
        states=[str(s) for s in states] if states is not None else None,
        as_of=as_of,
        model=model,
        priors=priors,
        chains=chains,
        output=(base / str(raw.get("output", "results"))).resolve(),
        simulate=simulate,
    )


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ManifestError(f"{path}: not valid YAML ({exc})") from exc
    return parse_manifest(raw, path.parent, path)


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    raw = manifest.to_dict()
    # keep inputs relative when they sit next to the manifest
    for key, value in raw["data"].items():
        p = Path(value)
        if p.parent == path.parent.resolve():
            raw["data"][key] = p.name
    if Path(raw["output"]).parent == path.parent.resolve():
        raw["output"] = Path(raw["output"]).name
    path.write_text(yaml.safe_dump(raw, sort_keys=False))


# --- assembly -----------------------------------------------------------------


@dataclass
class Inputs:
    deaths: dict[str, pd.Series]
    mobility: dict[str, pd.DataFrame]
    population: dict[str, int]
    ifr: dict[str, float]
    profile: DelayProfile | None
    warnings: list[str]


def load_inputs(manifest: Manifest) -> Inputs:
    """Read every input file named in the manifest."""
    for key in REQUIRED_DATA:
        if key not in manifest.data:
            raise ManifestError(f"data.{key} is required")
    for p in manifest.missing_files():
        raise FileNotFoundError(f"input file not found: {p}")
    deaths, w1 = load_deaths(manifest.data["deaths"])
    mobility, w2 = load_mobility(manifest.data["mobility"])
    population = load_population(manifest.data["population"])
    ifr = load_ifr(manifest.data["ifr"])
    profile = load_delay_profile(manifest)
    return Inputs(deaths, mobility, population, ifr, profile, w1 + w2)


def load_delay_profile(manifest: Manifest) -> DelayProfile | None:
    try:
        if "triangle" in manifest.data:
            tri = ReportingTriangle.from_csv(manifest.data["triangle"],
                                             max_delay=manifest.model.max_delay,
                                             as_of=manifest.as_of)
            return estimate_eta(tri)
        if "delay_profile" in manifest.data:
            return DelayProfile.from_csv(manifest.data["delay_profile"])
    except (KeyError, ValueError) as exc:
        raise IngestError(str(exc)) from exc
    return None


def delay_pmfs(horizon: int) -> tuple[DiscretePmf, DiscretePmf]:
    """Serial interval ``g`` and infection-to-death ``pi`` over ``horizon`` days."""
    return discretize(SERIAL_INTERVAL, horizon), convolve_infection_to_death(horizon=horizon)


def model_horizon(manifest: Manifest, states: list[StateData]) -> int:
    if manifest.model.horizon is not None:
        return manifest.model.horizon
    return max(MIN_HORIZON, max(s.days for s in states))


@dataclass
class Assembled:
    model: HierarchicalModel
    states: list[StateData]
    profile: DelayProfile | None
    notices: list[str]


def assemble(manifest: Manifest, inputs: Inputs | None = None) -> Assembled:
    """Ingest, cut windows and build the joint posterior."""
    inputs = inputs or load_inputs(manifest)
    states, notices = prepare_states(inputs.deaths, inputs.mobility, inputs.population,
                                     inputs.ifr, states=manifest.states, as_of=manifest.as_of)
    if not states:
        raise IngestError("no state reaches the death threshold; nothing to fit")
    g, pi = delay_pmfs(model_horizon(manifest, states))
    if inputs.profile is None:
        fractions = None
    else:
        cum = inputs.profile.cumulative()
        fractions = [reported_fraction_by_day(cum, s.days) for s in states]
    model = HierarchicalModel(states, pi, g, fractions, prior=manifest.priors,
                              dispersion_form=manifest.model.dispersion_form,
                              shared_ifr_noise=manifest.model.shared_ifr_noise,
                              centered=manifest.model.centered)
    return Assembled(model, states, inputs.profile, inputs.warnings + notices)


def describe(asm: Assembled) -> list[str]:
    """Human-readable model dimensions for ``--dry-run``."""
    lay = asm.model.layout
    lines = [f"states: {len(asm.states)}", f"parameters: {lay.size}"]
    for s in asm.states:
        lines.append(f"  {s.name}: {s.days} days from {s.dates[0].date()}, "
                     f"fit from day {s.fit_start}, population {s.population}, "
                     f"IFR {100 * s.ifr:.3g}%")
    lines.append(f"pmf horizon: {asm.model.g.horizon} days")
    lines.append("delay correction: " + ("none" if asm.profile is None
                                         else f"{asm.profile.max_delay + 1} delay bins"))
    return lines


# --- validation ---------------------------------------------------------------


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


def validate(manifest: Manifest, n_prior_draws: int = 20, seed: int = 0) -> list[Check]:
    """Run every input and model sanity check, collecting failures instead of raising."""
    checks: list[Check] = []

    def run(name, fn):
        try:
            detail = fn()
            checks.append(Check(name, True, detail or ""))
            return True
        except (IngestError, ManifestError, FileNotFoundError, TruncationError,
                ValueError, KeyError) as exc:
            checks.append(Check(name, False, str(exc)))
            return False

    loaded = {}
    for key in REQUIRED_DATA:
        if key not in manifest.data:
            checks.append(Check(f"{key} file", False, f"data.{key} missing from manifest"))
    readers = {"deaths": load_deaths, "mobility": load_mobility,
               "population": load_population, "ifr": load_ifr}
    for key, reader in readers.items():
        if key not in manifest.data:
            continue

        def read(key=key, reader=reader):
            loaded[key] = reader(manifest.data[key])
            value = loaded[key]
            if isinstance(value, tuple):
                value, warns = value
                return f"{len(value)} state(s)" + (f"; {len(warns)} warning(s)" if warns else "")
            return f"{len(value)} state(s)"

        run(f"{key} file", read)
    if {"triangle", "delay_profile"} & set(manifest.data):
        def profile():
            loaded["profile"] = load_delay_profile(manifest)
            return f"{loaded['profile'].max_delay + 1} delay bins"
        run("reporting delay", profile)
    else:
        loaded["profile"] = None

    if manifest.as_of is not None and "deaths" in loaded:
        def as_of():
            for name, s in loaded["deaths"][0].items():
                if not s.index[0] <= manifest.as_of <= s.index[-1]:
                    raise ValueError(f"as_of {manifest.as_of.date()} outside {name}'s dates "
                                     f"{s.index[0].date()}..{s.index[-1].date()}")
        run("as_of within data", as_of)

    asm = None
    if all(k in loaded for k in readers) and "profile" in loaded:
        inputs = Inputs(loaded["deaths"][0], loaded["mobility"][0], loaded["population"],
                        loaded["ifr"], loaded["profile"], [])
        holder = {}

        def build():
            holder["asm"] = assemble(manifest, inputs)
            return f"{len(holder['asm'].states)} state(s), {holder['asm'].model.dim} parameters"
        run("state windows", build)
        asm = holder.get("asm")

    horizon = (manifest.model.horizon if manifest.model.horizon is not None else
               (asm.model.g.horizon if asm is not None else MIN_HORIZON))

    def pmfs():
        g, pi = delay_pmfs(horizon)
        for name, pmf in (("g", g), ("pi", pi)):
            if abs(pmf.mass.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} sums to {pmf.mass.sum()!r}")
        return f"g and pi normalised over {horizon} days (pi mean {pi.mean():.2f})"
    run("delay pmfs", pmfs)

    if asm is not None:
        def prior_predictive():
            rng = np.random.default_rng(seed)
            model = asm.model
            for _ in range(n_prior_draws):
                theta = model.layout.unpack(sample_prior(model.layout, model.prior, rng))
                for m in range(len(asm.states)):
                    lat = model.latent(theta, m)
                    if not np.all(np.isfinite(lat["deaths"])):
                        raise ValueError(f"non-finite expected deaths for {asm.states[m].name}")
            return f"{n_prior_draws} prior draws give finite expected deaths"
        run("prior predictive", prior_predictive)
    return checks


def format_checks(checks: list[Check]) -> str:
    width = max(len(c.name) for c in checks)
    lines = [f"{'check'.ljust(width)}  status  detail"]
    for c in checks:
        lines.append(f"{c.name.ljust(width)}  {'PASS' if c.ok else 'FAIL':6}  {c.detail}")
    return "\n".join(lines)


# --- simulation ---------------------------------------------------------------


def load_truth(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"truth file not found: {path}")
    raw = yaml.safe_load(path.read_text())
    if not isinstance(raw, dict):
        raise ManifestError(f"{path}: truth must be a mapping")
    return raw


def simulate_dataset(manifest: Manifest, truth_raw: dict, output, seed: int) -> dict:
    """Forward-simulate deaths for every state and write a ready-to-fit dataset.

    Writes the four ingest CSVs, a reporting triangle, ``truth.json`` and a
    ``manifest.yaml`` that fits the generated files.  Returns the file map.
    """
    from .synthetic import (
        TrueParams, combine_triangles, default_delay_profile, simulate_state_deaths,
        split_by_delay, synthetic_mobility,
    )

    for key in ("population", "ifr"):
        if key not in manifest.data:
            raise ManifestError(f"data.{key} is required to simulate")
    population = load_population(manifest.data["population"])
    ifr = load_ifr(manifest.data["ifr"])
    names = manifest.states or list(population)
    for n in names:
        if n not in population or n not in ifr:
            raise IngestError(f"state {n!r} lacks a population or IFR entry")
    truth = TrueParams.from_mapping(truth_raw, names)

    rng = np.random.default_rng(seed)
    if "mobility" in manifest.data:
        mobility, _ = load_mobility(manifest.data["mobility"])
        missing = [n for n in names if n not in mobility]
        if missing:
            raise IngestError(f"no mobility for {missing}")
        mobility = {n: mobility[n] for n in names}
    else:
        sim = manifest.simulate
        dates = pd.date_range(sim.start, periods=sim.days, freq="D")
        mobility = {n: synthetic_mobility(dates, lockdown_day=sim.lockdown_day + 7 * i, rng=rng)
                    for i, n in enumerate(names)}

    profile = (load_delay_profile(manifest) or default_delay_profile(manifest.model.max_delay))
    horizon = manifest.model.horizon or max(MIN_HORIZON, max(len(f) for f in mobility.values()))
    g, pi = delay_pmfs(horizon)
    deaths, records = {}, []
    for n in names:
        frame = mobility[n]
        st = simulate_state_deaths(truth, n, population[n], ifr[n], frame, g, pi,
                                   profile.cumulative(), rng)
        deaths[n] = pd.Series(st.observed, index=frame.index)
        records.append(split_by_delay(st.observed, frame.index, profile, rng))

    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    last = max(s.index[-1] for s in deaths.values())
    files = {k: out / f"{k}.csv" for k in ("deaths", "mobility", "population", "ifr", "triangle")}
    write_deaths(deaths, files["deaths"])
    write_mobility(mobility, files["mobility"])
    write_population({n: population[n] for n in names}, files["population"])
    write_ifr({n: ifr[n] for n in names}, files["ifr"])
    combine_triangles(records, profile.max_delay, last).to_csv(files["triangle"])
    with open(out / "truth.json", "w") as fh:
        json.dump({"seed": seed, **truth.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    fit_manifest = replace(
        manifest, data={k: v.resolve() for k, v in files.items()}, states=names,
        as_of=None, output=(out / "fit").resolve(),
        model=replace(manifest.model, horizon=None),
    )
    write_manifest(fit_manifest, out / "manifest.yaml")
    return {k: str(v) for k, v in files.items()} | {"truth": str(out / "truth.json"),
                                                     "manifest": str(out / "manifest.yaml")}
