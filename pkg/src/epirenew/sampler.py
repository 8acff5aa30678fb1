"""MCMC over an unconstrained space plus convergence diagnostics.

Two samplers share one configuration and output format: the no-U-turn
sampler (``method="nuts"``, needs gradients, see :mod:`epirenew.nuts`) and
adaptive random-walk Metropolis (``method="metropolis"``, gradient-free).

For Metropolis, warmup runs in stages: a short buffer with a diagonal unit proposal and
step-size adaptation only, then a series of growing windows at whose ends the
proposal covariance is re-estimated (diagonal after the first window, full
afterwards), then a final buffer that tunes the step size alone.  Everything
is frozen after warmup.  Each stored iteration is ``thin`` Metropolis steps.

NUTS chains run concurrently in a thread pool (the compiled chain releases
the GIL); Metropolis chains run one after another.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

from .nuts import nuts_chain

logger = logging.getLogger(__name__)

RHAT_THRESHOLD = 1.05
DEFAULT_QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)
METHODS = ("nuts", "metropolis")


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChainConfig:
    n_chains: int = 4
    n_warmup: int = 1000
    n_samples: int = 1000
    seed: int = 0
    method: str = "nuts"
    #: ``None`` picks 0.8 for NUTS and 0.234 for Metropolis.
    target_accept: float | None = None
    thin: int = 1
    init_retries: int = 100
    #: Fraction of warmup spent in the initial and terminal step-size buffers.
    init_buffer: float = 0.15
    term_buffer: float = 0.1
    n_windows: int = 3
    max_tree_depth: int = 10
    #: NUTS tree-depth cap until the last metric window opens.
    warmup_tree_depth: int = 5
    dense_metric: bool = True
    #: Threads for concurrent NUTS chains; ``None`` uses one per chain up to the CPU count.
    n_workers: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.max_tree_depth < 1 or self.warmup_tree_depth < 1:
            raise ValueError("tree depths must be >= 1")
        if self.n_chains < 2:
            raise ValueError("n_chains must be >= 2")
        if self.n_warmup < 100:
            raise ValueError("n_warmup must be >= 100")
        if self.n_samples < 1 or self.thin < 1:
            raise ValueError("n_samples and thin must be >= 1")
        if self.target_accept is not None and not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.n_workers is not None and self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")

    @property
    def workers(self) -> int:
        if self.n_workers is not None:
            return min(self.n_workers, self.n_chains)
        return max(1, min(self.n_chains, os.cpu_count() or 1))

    @property
    def accept_target(self) -> float:
        if self.target_accept is not None:
            return self.target_accept
        return 0.8 if self.method == "nuts" else 0.234

    @classmethod
    def from_mapping(cls, values: dict | None) -> "ChainConfig":
        values = dict(values or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown chain keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PosteriorDraws:
    """Draws with shape ``(chain, iteration, parameter)``."""

    values: np.ndarray
    names: list[str]
    log_density: np.ndarray | None = None
    accept_rate: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[2] != len(self.names):
            raise ValueError("values must be (chain, iteration, parameter) matching names")

    @property
    def n_chains(self) -> int:
        return self.values.shape[0]

    @property
    def n_draws(self) -> int:
        return self.values.shape[1]

    def flat(self) -> np.ndarray:
        """All draws stacked chain after chain, shape ``(chains * draws, parameters)``."""
        return self.values.reshape(-1, self.values.shape[2])

    def column(self, name: str) -> np.ndarray:
        return self.values[:, :, self.names.index(name)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "iteration"] + self.names)
            for c in range(self.n_chains):
                for i in range(self.n_draws):
                    w.writerow([c, i] + [repr(float(v)) for v in self.values[c, i]])

    @classmethod
    def from_csv(cls, path) -> "PosteriorDraws":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(v) for v in r] for r in reader]
        if header[:2] != ["chain", "iteration"]:
            raise ValueError(f"{path}: not a draws file")
        arr = np.array(rows)
        chains = arr[:, 0].astype(int)
        n_chains = chains.max() + 1
        values = arr[:, 2:].reshape(n_chains, -1, len(header) - 2)
        return cls(values=values, names=header[2:])


def _warmup_schedule(cfg: ChainConfig) -> tuple[int, list[int], int]:
    """Steps at which the covariance is re-estimated (window ends)."""
    W = cfg.n_warmup * cfg.thin
    start = int(round(cfg.init_buffer * W))
    end = W - int(round(cfg.term_buffer * W))
    span = end - start
    # doubling windows: 1, 2, 4, ... parts of the adaptation span
    parts = np.cumsum(2.0 ** np.arange(cfg.n_windows))
    ends = [start + int(round(span * p / parts[-1])) for p in parts]
    return start, ends, W


def _chain(log_density, x0, lp0, cfg: ChainConfig, rng: np.random.Generator):
    d = x0.size
    x, lp = x0.copy(), lp0
    scale = 2.38 / math.sqrt(d)
    chol = np.eye(d) * 0.1
    start, ends, W = _warmup_schedule(cfg)
    window_start = start
    win_sum = np.zeros(d)
    win_outer = np.zeros((d, d))
    win_n = 0
    adapt_t = 0
    n_windows_done = 0
    log_scale = math.log(scale)

    def step(x, lp):
        prop = x + math.exp(log_scale) * (chol @ rng.standard_normal(d))
        lp_prop = log_density(prop)
        if math.isnan(lp_prop) or lp_prop == math.inf:
            raise SamplerError(f"log density returned {lp_prop} at a finite point")
        log_u = math.log(rng.random())
        if log_u < lp_prop - lp:
            return prop, lp_prop, 1.0 if lp_prop - lp >= 0 else math.exp(lp_prop - lp)
        return x, lp, 0.0 if lp_prop == -math.inf else min(1.0, math.exp(lp_prop - lp))

    for i in range(W):
        x, lp, acc_prob = step(x, lp)
        adapt_t += 1
        log_scale += (acc_prob - cfg.accept_target) / (adapt_t + 10) ** 0.6
        if start <= i < ends[-1]:
            win_sum += x
            win_outer += np.outer(x, x)
            win_n += 1
        if n_windows_done < len(ends) and i + 1 == ends[n_windows_done]:
            mean = win_sum / win_n
            cov = win_outer / win_n - np.outer(mean, mean)
            cov *= win_n / max(win_n - 1, 1)
            shrink = win_n / (win_n + 5.0)
            if n_windows_done == 0:
                cov = np.diag(np.diag(cov))
            cov = shrink * cov + (1 - shrink) * 1e-3 * np.eye(d)
            try:
                chol = np.linalg.cholesky(cov + 1e-10 * np.eye(d))
            except np.linalg.LinAlgError:
                chol = np.diag(np.sqrt(np.maximum(np.diag(cov), 1e-10)))
            log_scale = math.log(2.38 / math.sqrt(d))
            adapt_t = 0
            n_windows_done += 1
            win_sum[:] = 0
            win_outer[:] = 0
            win_n = 0

    out = np.empty((cfg.n_samples, d))
    out_lp = np.empty(cfg.n_samples)
    accepted = 0.0
    for s in range(cfg.n_samples):
        for _ in range(cfg.thin):
            x, lp, acc_prob = step(x, lp)
            accepted += acc_prob
        out[s] = x
        out_lp[s] = lp
    return out, out_lp, accepted / (cfg.n_samples * cfg.thin), math.exp(log_scale)


def _initialize(log_density, init, cfg: ChainConfig, rng, chain: int):
    for attempt in range(cfg.init_retries):
        x0 = np.asarray(init(rng) if callable(init) else init[chain], dtype=np.float64)
        lp0 = log_density(x0)
        if isinstance(lp0, tuple):
            lp0 = lp0[0]
        if math.isnan(lp0) or lp0 == math.inf:
            raise SamplerError(f"log density returned {lp0} at the initial point")
        if lp0 > -math.inf:
            return x0, lp0
        if not callable(init):
            break
    raise SamplerError(f"chain {chain}: no finite initial point after {cfg.init_retries} attempts")


def run_chains(
    log_density: Callable[[np.ndarray], float],
    init,
    cfg: ChainConfig,
    names: list[str] | None = None,
    target: tuple | None = None,
) -> PosteriorDraws:
    """Run ``cfg.n_chains`` independent chains.

    ``init`` is either a callable drawing a starting point from a
    ``numpy.random.Generator`` (retried until the density is finite) or an
    array of starting points, one row per chain.  NUTS needs ``target``, a
    ``(fn, data)`` pair whose numba-jitted ``fn(x, data)`` returns the log
    density and its gradient (see :mod:`epirenew.nuts`).  Each chain gets
    its own stream spawned from ``cfg.seed``, so results depend only on the
    seed.
    """
    if cfg.method == "nuts" and target is None:
        raise ValueError("NUTS needs a compiled (fn, data) target")
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_chains)
    results = []
    extras = []
    starts = []
    for c, ss in enumerate(streams):
        rng = np.random.Generator(np.random.PCG64(ss))
        x0, lp0 = _initialize(log_density, init, cfg, rng, c)
        starts.append((x0, lp0, rng))
    if cfg.method == "nuts":
        def one(start):
            x0, _, rng = start
            return nuts_chain(target, x0, cfg.n_warmup, cfg.n_samples, cfg.accept_target,
                              cfg.max_tree_depth, cfg.dense_metric,
                              int(rng.integers(0, 2**31 - 1)),
                              early_depth=cfg.warmup_tree_depth)

        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for out in pool.map(one, starts):
                results.append(out[:4])
                extras.append(out[4])
    else:
        for x0, lp0, rng in starts:
            results.append(_chain(log_density, x0, lp0, cfg, rng))
    for c, r in enumerate(results):
        logger.debug("chain %d: acceptance %.3f", c, r[2])
    values = np.stack([r[0] for r in results])
    if names is None:
        names = [f"x[{i}]" for i in range(values.shape[2])]
    info = {"step_size": [r[3] for r in results], "config": cfg.to_dict()}
    if extras:
        info["divergent"] = [e["divergent"] for e in extras]
        info["max_depth_hits"] = [e["max_depth_hits"] for e in extras]
        info["mean_depth"] = [e["mean_depth"] for e in extras]
        info["mean_steps"] = [e["mean_steps"] for e in extras]
        info["warmup_steps"] = [e["warmup_steps"] for e in extras]
    return PosteriorDraws(
        values=values,
        names=list(names),
        log_density=np.stack([r[1] for r in results]),
        accept_rate=np.array([r[2] for r in results]),
        info=info,
    )


# --- diagnostics -------------------------------------------------------------


def _split_chains(x: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (x.size + 0.25))


def _rhat_basic(x: np.ndarray) -> float:
    m, n = x.shape
    W = x.var(axis=1, ddof=1).mean()
    B = n * x.mean(axis=1).var(ddof=1)
    if W <= 0:
        return math.inf if B > 0 else math.nan
    var_plus = (n - 1) / n * W + B / n
    return math.sqrt(var_plus / W)


def split_rhat(x: np.ndarray) -> float:
    """Rank-normalized split R-hat (max of bulk and folded) for ``(chains, draws)``."""
    x = np.asarray(x, dtype=np.float64)
    s = _split_chains(x)
    bulk = _rhat_basic(_rank_normalize(s))
    folded = _rhat_basic(_rank_normalize(np.abs(s - np.median(s))))
    vals = [v for v in (bulk, folded) if not math.isnan(v)]
    return max(vals) if vals else math.nan


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=nfft, axis=-1)
    return np.fft.irfft(f * np.conj(f), n=nfft, axis=-1)[..., :n] / n


def ess(x: np.ndarray) -> float:
    """Bulk effective sample size (rank-normalized split chains, Geyer truncation)."""
    s = _rank_normalize(_split_chains(np.asarray(x, dtype=np.float64)))
    m, n = s.shape
    acov = _autocov(s)
    chain_var = acov[:, 0] * n / (n - 1)
    mean_var = chain_var.mean()
    var_plus = mean_var * (n - 1) / n + s.mean(axis=1).var(ddof=1)
    if var_plus <= 0:
        return math.nan
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer initial positive sequence, made monotone
    pairs = []
    t = 0
    while t + 1 < n:
        p = rho[t] + rho[t + 1]
        if p < 0:
            break
        pairs.append(p)
        t += 2
    pairs = np.minimum.accumulate(np.array(pairs)) if pairs else np.array([1.0])
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / math.log10(m * n))
    return m * n / tau


def diagnostics(draws: PosteriorDraws, threshold: float = RHAT_THRESHOLD) -> dict:
    """Per-parameter R-hat and ESS plus the list of parameters failing ``threshold``."""
    if draws.n_chains < 2 or draws.n_draws < 100:
        raise ValueError("diagnostics need >= 2 chains with >= 100 draws each")
    rows = {}
    for j, name in enumerate(draws.names):
        x = draws.values[:, :, j]
        rows[name] = {"rhat": split_rhat(x), "ess": ess(x)}
    flagged = [n for n, r in rows.items() if not r["rhat"] < threshold]
    finite = [r["rhat"] for r in rows.values() if not math.isnan(r["rhat"])]
    return {
        "parameters": rows,
        "flagged": flagged,
        "max_rhat": max(finite) if finite else math.nan,
        "min_ess": min((r["ess"] for r in rows.values() if not math.isnan(r["ess"])),
                       default=math.nan),
        "converged": not flagged,
        "threshold": threshold,
    }


def summarize(draws, quantiles=DEFAULT_QUANTILES) -> list[dict]:
    """Mean, median and quantiles along axis 0 of ``draws``.

    ``draws`` is ``(n_draws,)`` for a scalar or ``(n_draws, T)`` for a daily
    series (one row per day).
    """
    x = np.asarray(draws, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no draws to summarize")
    if x.ndim == 1:
        x = x[:, None]
    q = np.quantile(x, quantiles, axis=0)
    mean = x.mean(axis=0)
    med = np.median(x, axis=0)
    rows = []
    for t in range(x.shape[1]):
        row = {"mean": float(mean[t]), "median": float(med[t])}
        for qi, qv in zip(quantiles, q[:, t]):
            row[f"q{qi * 100:g}"] = float(qv)
        rows.append(row)
    return rows
