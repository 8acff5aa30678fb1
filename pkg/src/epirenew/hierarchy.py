"""Hierarchical prior, parameter transforms and the joint log-posterior.

Parameter blocks and their unconstrained transforms:

=============  ==========  =========  =============================
block          shape       transform  prior (defaults)
=============  ==========  =========  =============================
r0             (M,)        log        Normal(3.28, k_scale), r0 > 0
k_scale        ()          log        HalfNormal(0.5)
alpha          (4,)        identity   Normal(0, 0.5)
sigma_beta     ()          log        HalfNormal(0.5)
sigma_gamma    ()          log        HalfNormal(0.5)
beta           (4, M)      / sigma    Normal(0, sigma_beta)
gamma          (4, M)      / sigma    Normal(0, sigma_gamma)
seed           (M,)        log        Exponential(mean 30)
psi            (M,)        logit      Beta(80, 80)
phi            ()          log        HalfNormal(5)
ifr_noise      (M,) or ()  log        Normal(1, 0.1), > 0
delay_alpha    ()          log        Gamma(100, rate 1)
=============  ==========  =========  =============================

``k_scale`` is a standard deviation.  Expected reported deaths use the
Dirichlet mean of the reporting proportions, so ``delay_alpha`` is informed by
its prior only; it is kept in the vector so that downstream draws of the
proportions carry its uncertainty.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, fields

import numba
import numpy as np
from scipy.special import betaln, expit, gammaln, log_ndtr, logit

from .delaydist import DiscretePmf
from .ingest import StateData
from .observation import DISPERSION_FORMS
from .renewal import N_COVARIATES, SEED_DAYS

_LOG_2PI = math.log(2 * math.pi)
_LOG2 = math.log(2.0)
# reordering of sums only; inf and nan semantics stay intact
_REASSOC = {"reassoc", "contract"}


@dataclass(frozen=True)
class PriorSpec:
    r0_mean: float = 3.28
    k_scale: float = 0.5
    alpha_sd: float = 0.5
    sigma_beta_scale: float = 0.5
    sigma_gamma_scale: float = 0.5
    seed_mean: float = 30.0
    psi_a: float = 80.0
    psi_b: float = 80.0
    phi_scale: float = 5.0
    ifr_noise_mean: float = 1.0
    ifr_noise_sd: float = 0.1
    delay_alpha_shape: float = 100.0
    delay_alpha_rate: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or (f.name != "r0_mean" and v <= 0):
                raise ValueError(f"prior hyperparameter {f.name} must be positive, got {v}")

    @classmethod
    def from_mapping(cls, values: dict | None) -> "PriorSpec":
        values = dict(values or {})
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown prior keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in values.items()})

    def to_dict(self) -> dict:
        return asdict(self)


# (name, transform); shapes depend on the number of states.
_BLOCKS = (
    ("r0", "log"),
    ("k_scale", "log"),
    ("alpha", "identity"),
    ("sigma_beta", "log"),
    ("sigma_gamma", "log"),
    ("beta", "identity"),
    ("gamma", "identity"),
    ("seed", "log"),
    ("psi", "logit"),
    ("phi", "log"),
    ("ifr_noise", "log"),
    ("delay_alpha", "log"),
)


EFFECT_GROUPS = ("beta", "gamma")


_CENTER_LABEL = re.compile(r"^(beta|gamma)(?:\[([1-9])\])?$")


def centered_mask(centered) -> dict[str, np.ndarray]:
    """Per-covariate centring flags for each effect group.

    ``centered`` is a bool, or labels such as ``"beta"`` (every covariate
    row) and ``"gamma[2]"`` (one row, 1-based).
    """
    mask = {grp: np.zeros(N_COVARIATES, dtype=bool) for grp in EFFECT_GROUPS}
    if centered is True:
        for m in mask.values():
            m[:] = True
        return mask
    if centered is False or centered is None:
        return mask
    for label in [centered] if isinstance(centered, str) else centered:
        hit = _CENTER_LABEL.match(str(label).strip())
        if hit is None or (hit.group(2) and int(hit.group(2)) > N_COVARIATES):
            raise ValueError(f"cannot centre {label!r}; use 'beta', 'gamma' or e.g. 'beta[1]'")
        if hit.group(2):
            mask[hit.group(1)][int(hit.group(2)) - 1] = True
        else:
            mask[hit.group(1)][:] = True
    return mask


class ParamLayout:
    """Maps named parameter blocks to slices of a flat vector."""

    def __init__(self, state_names: list[str], shared_ifr_noise: bool = False,
                 centered=False):
        self.state_names = list(state_names)
        self.shared_ifr_noise = shared_ifr_noise
        self.center = centered_mask(centered)
        M = len(self.state_names)
        if M < 1:
            raise ValueError("need at least one state")
        shapes = {
            "r0": (M,), "k_scale": (), "alpha": (N_COVARIATES,), "sigma_beta": (),
            "sigma_gamma": (), "beta": (N_COVARIATES, M), "gamma": (N_COVARIATES, M),
            "seed": (M,), "psi": (M,), "phi": (), "ifr_noise": () if shared_ifr_noise else (M,),
            "delay_alpha": (),
        }
        self.shapes = shapes
        self.transforms = dict(_BLOCKS)
        self.slices = {}
        pos = 0
        for name, _ in _BLOCKS:
            n = int(np.prod(shapes[name], dtype=int))
            self.slices[name] = slice(pos, pos + n)
            pos += n
        self.size = pos
        self.offsets = np.array([self.slices[n].start for n, _ in _BLOCKS] + [pos], dtype=np.int64)
        self._log_mask = np.zeros(pos, dtype=bool)
        self._logit_mask = np.zeros(pos, dtype=bool)
        for name, tr in _BLOCKS:
            if tr == "log":
                self._log_mask[self.slices[name]] = True
            elif tr == "logit":
                self._logit_mask[self.slices[name]] = True

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    def names(self) -> list[str]:
        out = []
        for name, _ in _BLOCKS:
            shape = self.shapes[name]
            if shape == ():
                out.append(name)
            elif name in ("beta", "gamma"):
                out += [f"{name}[{k + 1},{s}]" for k in range(N_COVARIATES) for s in self.state_names]
            elif name == "alpha":
                out += [f"alpha[{k + 1}]" for k in range(N_COVARIATES)]
            else:
                out += [f"{name}[{s}]" for s in self.state_names]
        return out

    def unpack(self, flat: np.ndarray) -> "ParamVector":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ValueError(f"expected a vector of length {self.size}, got {flat.shape}")
        parts = {}
        for name, _ in _BLOCKS:
            block = flat[self.slices[name]]
            parts[name] = float(block[0]) if self.shapes[name] == () else block.reshape(self.shapes[name])
        return ParamVector(**parts)

    def pack(self, theta: "ParamVector") -> np.ndarray:
        out = np.empty(self.size)
        for name, _ in _BLOCKS:
            v = np.asarray(getattr(theta, name), dtype=np.float64)
            if v.shape != self.shapes[name]:
                raise ValueError(f"{name}: expected shape {self.shapes[name]}, got {v.shape}")
            out[self.slices[name]] = v.ravel()
        return out

    # -- transforms --------------------------------------------------------

    def in_domain(self, flat: np.ndarray) -> bool:
        pos = flat[self._log_mask]
        unit = flat[self._logit_mask]
        return bool(np.all(np.isfinite(flat)) and np.all(pos > 0)
                    and np.all((unit > 0) & (unit < 1)))

    def unconstrain(self, flat) -> np.ndarray:
        """Constrained flat vector to the real line.

        Positive blocks are logged and ``psi`` is logit-transformed.  Effect
        rows not marked as centred are stored divided by their pooling
        scale, which removes the funnel between a scale and weakly
        identified effects.  Effects the data pin down tightly sample better
        centred.
        """
        flat = np.asarray(flat, dtype=np.float64)
        if not self.in_domain(flat):
            raise ValueError("parameter vector is outside its domain (or on a boundary)")
        v = flat.copy()
        v[self._log_mask] = np.log(flat[self._log_mask])
        v[self._logit_mask] = logit(flat[self._logit_mask])
        for grp in EFFECT_GROUPS:
            nc = self._noncentered(grp)
            v[nc] /= flat[self.slices[f"sigma_{grp}"]]
        return v

    @property
    def centered(self) -> list[str]:
        """Centred rows as labels, e.g. ``["beta[1]", "gamma"]``."""
        out = []
        for grp in EFFECT_GROUPS:
            m = self.center[grp]
            if m.all():
                out.append(grp)
            else:
                out += [f"{grp}[{k + 1}]" for k in np.flatnonzero(m)]
        return out

    def _noncentered(self, grp: str) -> np.ndarray:
        """Flat indices of the effects of ``grp`` stored divided by their scale."""
        sl = self.slices[grp]
        rows = np.repeat(~self.center[grp], self.n_states)
        return np.arange(sl.start, sl.stop)[rows]

    def constrain(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        flat = v.copy()
        flat[self._log_mask] = np.exp(v[self._log_mask])
        flat[self._logit_mask] = expit(v[self._logit_mask])
        for grp in EFFECT_GROUPS:
            flat[self._noncentered(grp)] *= flat[self.slices[f"sigma_{grp}"]]
        return flat

    def log_jacobian(self, v) -> float:
        """``log |d constrain / dv|`` at unconstrained point ``v``."""
        v = np.asarray(v, dtype=np.float64)
        u = v[self._logit_mask]
        # log(sigmoid(u) * (1 - sigmoid(u))) = -softplus(u) - softplus(-u)
        logit_part = -np.logaddexp(0.0, u) - np.logaddexp(0.0, -u)
        scales = sum(self._noncentered(grp).size * v[self.slices[f"sigma_{grp}"]][0]
                     for grp in EFFECT_GROUPS)
        return float(v[self._log_mask].sum() + logit_part.sum() + scales)


@dataclass
class ParamVector:
    r0: np.ndarray
    k_scale: float
    alpha: np.ndarray
    sigma_beta: float
    sigma_gamma: float
    beta: np.ndarray
    gamma: np.ndarray
    seed: np.ndarray
    psi: np.ndarray
    phi: float
    ifr_noise: np.ndarray | float
    delay_alpha: float

    def ifr_noise_for(self, m: int) -> float:
        noise = np.asarray(self.ifr_noise)
        return float(noise) if noise.ndim == 0 else float(noise[m])


# --- priors ------------------------------------------------------------------


def _normal(x, mu, sd):
    x = np.asarray(x, dtype=np.float64)
    return float(np.sum(-0.5 * ((x - mu) / sd) ** 2) - x.size * (math.log(sd) + 0.5 * _LOG_2PI))


def _half_normal(x, scale):
    return _normal(x, 0.0, scale) + np.size(x) * _LOG2


def prior_terms(theta: ParamVector, spec: PriorSpec) -> dict[str, float]:
    """Per-block prior log-densities in constrained space (no Jacobian)."""
    s = spec
    k = theta.k_scale
    r0 = np.asarray(theta.r0, dtype=np.float64)
    psi = np.asarray(theta.psi, dtype=np.float64)
    seed = np.asarray(theta.seed, dtype=np.float64)
    noise = np.atleast_1d(np.asarray(theta.ifr_noise, dtype=np.float64))
    a, b = s.delay_alpha_shape, s.delay_alpha_rate
    x = theta.delay_alpha
    return {
        # Normal truncated to r0 > 0, renormalized since k is sampled.
        "r0": _normal(r0, s.r0_mean, k) - r0.size * float(log_ndtr(s.r0_mean / k)),
        "k_scale": _half_normal(k, s.k_scale),
        "alpha": _normal(theta.alpha, 0.0, s.alpha_sd),
        "sigma_beta": _half_normal(theta.sigma_beta, s.sigma_beta_scale),
        "sigma_gamma": _half_normal(theta.sigma_gamma, s.sigma_gamma_scale),
        "beta": _normal(theta.beta, 0.0, theta.sigma_beta),
        "gamma": _normal(theta.gamma, 0.0, theta.sigma_gamma),
        "seed": float(np.sum(-seed / s.seed_mean) - seed.size * math.log(s.seed_mean)),
        "psi": float(np.sum((s.psi_a - 1) * np.log(psi) + (s.psi_b - 1) * np.log1p(-psi))
                     - psi.size * betaln(s.psi_a, s.psi_b)),
        "phi": _half_normal(theta.phi, s.phi_scale),
        "ifr_noise": _normal(noise, s.ifr_noise_mean, s.ifr_noise_sd)
                     - noise.size * float(log_ndtr(s.ifr_noise_mean / s.ifr_noise_sd)),
        "delay_alpha": a * math.log(b) - float(gammaln(a)) + (a - 1) * math.log(x) - b * x,
    }


def log_prior(theta: ParamVector, spec: PriorSpec = PriorSpec()) -> float:
    """Joint prior log-density; ``-inf`` outside the support."""
    positives = [theta.k_scale, theta.sigma_beta, theta.sigma_gamma, theta.phi,
                 theta.delay_alpha, theta.r0, theta.seed, theta.ifr_noise]
    if any(np.any(~(np.asarray(p) > 0)) for p in positives):
        return -math.inf
    psi = np.asarray(theta.psi)
    if np.any(~((psi > 0) & (psi < 1))):
        return -math.inf
    reals = np.concatenate([np.ravel(theta.alpha), np.ravel(theta.beta), np.ravel(theta.gamma)])
    if not np.all(np.isfinite(reals)):
        return -math.inf
    return math.fsum(prior_terms(theta, spec).values())


def sample_prior(layout: ParamLayout, spec: PriorSpec, rng: np.random.Generator) -> np.ndarray:
    """One constrained flat draw from the prior."""
    M = layout.n_states
    k = abs(rng.normal(0, spec.k_scale))
    sb = abs(rng.normal(0, spec.sigma_beta_scale))
    sg = abs(rng.normal(0, spec.sigma_gamma_scale))
    r0 = np.empty(M)
    for m in range(M):
        r0[m] = rng.normal(spec.r0_mean, k)
        while r0[m] <= 0:
            r0[m] = rng.normal(spec.r0_mean, k)
    n_noise = () if layout.shared_ifr_noise else (M,)
    noise = rng.normal(spec.ifr_noise_mean, spec.ifr_noise_sd, size=n_noise)
    noise = np.abs(noise)
    theta = ParamVector(
        r0=r0, k_scale=k,
        alpha=rng.normal(0, spec.alpha_sd, N_COVARIATES),
        sigma_beta=sb, sigma_gamma=sg,
        beta=rng.normal(0, sb, (N_COVARIATES, M)),
        gamma=rng.normal(0, sg, (N_COVARIATES, M)),
        seed=rng.exponential(spec.seed_mean, M),
        psi=rng.beta(spec.psi_a, spec.psi_b, M),
        phi=abs(rng.normal(0, spec.phi_scale)),
        ifr_noise=float(noise) if n_noise == () else noise,
        delay_alpha=rng.gamma(spec.delay_alpha_shape, 1 / spec.delay_alpha_rate),
    )
    return layout.pack(theta)


@numba.njit(cache=True, error_model="numpy")
def _sum_normal(x, mu, sd):
    acc = 0.0
    for v in x:
        z = (v - mu) / sd
        acc += -0.5 * z * z
    return acc - x.size * (math.log(sd) + 0.5 * _LOG_2PI)


@numba.njit(cache=True, error_model="numpy")
def _log_phi(x):
    return math.log(0.5 * math.erfc(-x / math.sqrt(2.0)))


@numba.njit(cache=True, error_model="numpy")
def _flat_log_prior(flat, off, hyper):
    """Compiled twin of :func:`log_prior` on a constrained flat vector.

    ``off`` holds the block start offsets in ``_BLOCKS`` order plus the end;
    ``hyper`` holds the :class:`PriorSpec` fields in declaration order.
    """
    (r0_mean, k_sd, alpha_sd, sb_sd, sg_sd, seed_mean, psi_a, psi_b, phi_sd,
     noise_mean, noise_sd, da_shape, da_rate) = hyper
    r0 = flat[off[0]:off[1]]
    k = flat[off[1]]
    sb = flat[off[3]]
    sg = flat[off[4]]
    seed = flat[off[7]:off[8]]
    psi = flat[off[8]:off[9]]
    phi = flat[off[9]]
    noise = flat[off[10]:off[11]]
    da = flat[off[11]]
    lp = _sum_normal(r0, r0_mean, k) - r0.size * _log_phi(r0_mean / k)
    lp += _sum_normal(flat[off[1]:off[2]], 0.0, k_sd) + _LOG2
    lp += _sum_normal(flat[off[2]:off[3]], 0.0, alpha_sd)
    lp += _sum_normal(flat[off[3]:off[4]], 0.0, sb_sd) + _LOG2
    lp += _sum_normal(flat[off[4]:off[5]], 0.0, sg_sd) + _LOG2
    lp += _sum_normal(flat[off[5]:off[6]], 0.0, sb)
    lp += _sum_normal(flat[off[6]:off[7]], 0.0, sg)
    for v in seed:
        lp += -v / seed_mean - math.log(seed_mean)
    lbeta = math.lgamma(psi_a) + math.lgamma(psi_b) - math.lgamma(psi_a + psi_b)
    for v in psi:
        lp += (psi_a - 1.0) * math.log(v) + (psi_b - 1.0) * math.log1p(-v) - lbeta
    lp += _sum_normal(flat[off[9]:off[10]], 0.0, phi_sd) + _LOG2
    lp += _sum_normal(noise, noise_mean, noise_sd) - noise.size * _log_phi(noise_mean / noise_sd)
    lp += (da_shape * math.log(da_rate) - math.lgamma(da_shape)
           + (da_shape - 1.0) * math.log(da) - da_rate * da)
    return lp


# --- likelihood kernel -------------------------------------------------------


@numba.njit(cache=True, fastmath=_REASSOC, inline="always", error_model="numpy")
def _dot(a, a0, b, b0, n):
    acc = 0.0
    for i in range(n):
        acc += a[a0 + i] * b[b0 + i]
    return acc


@numba.njit(cache=True, fastmath=_REASSOC, inline="always", error_model="numpy")
def _axpy(alpha, x, x0, y, y0, n):
    for i in range(n):
        y[y0 + i] += alpha * x[x0 + i]


# Convolutions below run over reversed kernels (``rev[j] = kernel[H-1-j]``)
# so every inner loop is a contiguous dot product the compiler can vectorize.


@numba.njit(cache=True, fastmath=_REASSOC, error_model="numpy")
def _state_loglik(seed, n_seed, rt, g, pi, population, scale, obs, lo, hi, phi, quadratic):
    """Renewal -> expected deaths -> scaled NegBin log-likelihood for one state.

    ``scale[t]`` is ``psi * P_t * IFR_eff``; only days ``lo <= t < hi`` enter.
    """
    T = rt.size
    c = np.zeros(T)
    total = 0.0
    H = g.size
    grev = g[::-1].copy()
    for t in range(T):
        room = max(population - total, 0.0)
        if t < n_seed:
            new = min(seed, room)
        else:
            t0 = max(0, t - H)
            acc = _dot(c, t0, grev, H - t + t0, t - t0)
            s = max(0.0, 1.0 - total / population)
            new = min(s * rt[t] * acc, room)
        c[t] = new
        total += new
    ll = 0.0
    P = pi.size
    pirev = pi[::-1].copy()
    for t in range(lo, hi):
        t0 = max(0, t - P)
        d = _dot(c, t0, pirev, P - t + t0, t - t0)
        mu = scale[t] * d
        y = obs[t]
        if mu <= 0.0:
            if y > 0:
                return -np.inf
            continue
        r = phi if quadratic else mu * phi
        ll += (math.lgamma(y + r) - math.lgamma(r) - math.lgamma(y + 1.0)
               + r * (math.log(r) - math.log(r + mu)) + y * (math.log(mu) - math.log(r + mu)))
    return ll


@numba.njit(cache=True, fastmath=_REASSOC, error_model="numpy")
def _state_loglik_grad(seed, n_seed, rt, g, pi, population, scale, obs, lo, hi, phi, quadratic):
    """:func:`_state_loglik` plus reverse-mode gradients.

    Returns ``(ll, d_seed, d_rt, d_scale, d_phi)`` where ``d_rt`` and
    ``d_scale`` are per-day arrays.
    """
    T = rt.size
    H = g.size
    P = pi.size
    c = np.zeros(T)
    conv = np.zeros(T)   # sum_tau c_tau g_{t-tau}
    susc = np.zeros(T)
    clamped = np.zeros(T, dtype=np.bool_)
    grev = g[::-1].copy()
    pirev = pi[::-1].copy()
    total = 0.0
    for t in range(T):
        room = max(population - total, 0.0)
        if t < n_seed:
            new = seed
            if new > room:
                new = room
                clamped[t] = True
        else:
            t0 = max(0, t - H)
            acc = _dot(c, t0, grev, H - t + t0, t - t0)
            conv[t] = acc
            s = 1.0 - total / population
            susc[t] = s if s > 0.0 else 0.0
            new = susc[t] * rt[t] * acc
            if new > room:
                new = room
                clamped[t] = True
        c[t] = new
        total += new

    ll = 0.0
    d_phi = 0.0
    d_scale = np.zeros(T)
    d_dead = np.zeros(T)
    for t in range(lo, hi):
        t0 = max(0, t - P)
        d = _dot(c, t0, pirev, P - t + t0, t - t0)
        mu = scale[t] * d
        y = obs[t]
        if mu <= 0.0:
            if y > 0:
                return -np.inf, 0.0, np.zeros(T), d_scale, 0.0
            continue
        if quadratic:
            r = phi
            dr_dmu = 0.0
            dr_dphi = 1.0
        else:
            r = mu * phi
            dr_dmu = phi
            dr_dphi = mu
        lr = math.log(r + mu)
        ll += (math.lgamma(y + r) - math.lgamma(r) - math.lgamma(y + 1.0)
               + r * (math.log(r) - lr) + y * (math.log(mu) - lr))
        # partials of the log pmf
        dl_dr = _digamma(y + r) - _digamma(r) + math.log(r) - lr + 1.0 - (r + y) / (r + mu)
        dl_dmu = y / mu - (r + y) / (r + mu)
        g_mu = dl_dmu + dl_dr * dr_dmu
        d_phi += dl_dr * dr_dphi
        d_scale[t] = g_mu * d
        d_dead[t] = g_mu * scale[t]

    # adjoint of the renewal recursion: lam[t] = dll/dc_t
    lam = np.zeros(T)
    for tau in range(T):
        t0 = max(tau + 1, lo)
        t1 = min(hi, tau + P + 1)
        if t1 > t0:
            lam[tau] = _dot(d_dead, t0, pi, t0 - tau - 1, t1 - t0)
    d_rt = np.zeros(T)
    d_seed = 0.0
    # later days reach every earlier c through the cumulative total; carry
    # that shared term as a running sum instead of spreading it eagerly
    carry = 0.0
    for t in range(T - 1, -1, -1):
        lt = lam[t] - carry
        if clamped[t]:
            # c_t = N - sum_{tau<t} c_tau
            carry += lt
            continue
        if t < n_seed:
            d_seed += lt
            continue
        d_rt[t] += lt * susc[t] * conv[t]
        t0 = max(0, t - H)
        _axpy(lt * susc[t] * rt[t], grev, H - t + t0, lam, t0, t - t0)
        if susc[t] > 0.0:
            carry += lt * rt[t] * conv[t] / population
    return ll, d_seed, d_rt, d_scale, d_phi


@numba.njit(cache=True, error_model="numpy")
def _digamma(x):
    # asymptotic series after shifting x above 6
    acc = 0.0
    while x < 6.0:
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    return acc + math.log(x) - 0.5 * inv - inv2 * (
        1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 / 132))))


@numba.njit(cache=True, error_model="numpy")
def _log_density_grad(v, data):
    """Log density and gradient at unconstrained ``v`` in one compiled pass.

    ``data`` is built by :meth:`HierarchicalModel.compiled_target`; per-state
    series are concatenated with boundaries in ``starts``.
    """
    (off, hyper, g, pi, n_seed, starts, pops, base, obs, xs, zs, los, his, quadratic,
     cen_b, cen_g) = data
    # cen_b[k] / cen_g[k]: covariate row k of beta / gamma is stored centred
    (r0_mean, k_sd, alpha_sd, sb_sd, sg_sd, seed_mean, psi_a, psi_b, phi_sd,
     noise_mean, noise_sd, da_shape, da_rate) = hyper
    n = v.size
    grad = np.zeros(n)
    if not np.all(np.isfinite(v)):
        grad[:] = np.nan
        return -np.inf, grad
    M = off[1] - off[0]
    K = (off[3] - off[2])
    flat = v.copy()
    log_jac = 0.0
    for b in (0, 1, 3, 4, 7, 9, 10, 11):
        for i in range(off[b], off[b + 1]):
            flat[i] = math.exp(v[i])
            log_jac += v[i]
    for i in range(off[8], off[9]):
        u = v[i]
        flat[i] = 1.0 / (1.0 + math.exp(-u))
        log_jac += -(max(u, 0.0) + math.log1p(math.exp(-abs(u)))) \
                   - (max(-u, 0.0) + math.log1p(math.exp(-abs(u))))
    sb = flat[off[3]]
    sg = flat[off[4]]
    for i in range(off[5], off[6]):
        if not cen_b[(i - off[5]) // M]:
            flat[i] = v[i] * sb
            log_jac += v[off[3]]
    for i in range(off[6], off[7]):
        if not cen_g[(i - off[6]) // M]:
            flat[i] = v[i] * sg
            log_jac += v[off[4]]
    for i in range(n):
        if not (np.isfinite(flat[i])):
            grad[:] = np.nan
            return -np.inf, grad
    for b in (0, 1, 3, 4, 7, 9, 10, 11):
        for i in range(off[b], off[b + 1]):
            if not flat[i] > 0.0:
                grad[:] = np.nan
                return -np.inf, grad
    for i in range(off[8], off[9]):
        if not 0.0 < flat[i] < 1.0:
            grad[:] = np.nan
            return -np.inf, grad
    lp = _flat_log_prior(flat, off, hyper)

    # prior gradient in constrained coordinates (effect blocks handled below)
    gt = np.zeros(n)
    k = flat[off[1]]
    ss = 0.0
    for i in range(off[0], off[1]):
        dev = flat[i] - r0_mean
        gt[i] = -dev / (k * k)
        ss += dev * dev
    a = r0_mean / k
    mills = math.exp(-0.5 * a * a - _log_phi(a)) / math.sqrt(2.0 * math.pi)
    gt[off[1]] = ss / k ** 3 - M / k + M * mills * a / k - k / (k_sd * k_sd)
    for i in range(off[2], off[3]):
        gt[i] = -flat[i] / (alpha_sd * alpha_sd)
    gt[off[3]] = -sb / (sb_sd * sb_sd)
    gt[off[4]] = -sg / (sg_sd * sg_sd)
    sq_b = 0.0
    n_cb = 0
    for i in range(off[5], off[6]):
        if cen_b[(i - off[5]) // M]:
            gt[i] = -flat[i] / (sb * sb)
            sq_b += flat[i] * flat[i]
            n_cb += 1
    sq_g = 0.0
    n_cg = 0
    for i in range(off[6], off[7]):
        if cen_g[(i - off[6]) // M]:
            gt[i] = -flat[i] / (sg * sg)
            sq_g += flat[i] * flat[i]
            n_cg += 1
    if n_cb > 0:
        gt[off[3]] += sq_b / sb ** 3 - n_cb / sb
    if n_cg > 0:
        gt[off[4]] += sq_g / sg ** 3 - n_cg / sg
    for i in range(off[7], off[8]):
        gt[i] = -1.0 / seed_mean
    for i in range(off[8], off[9]):
        gt[i] = (psi_a - 1.0) / flat[i] - (psi_b - 1.0) / (1.0 - flat[i])
    gt[off[9]] = -flat[off[9]] / (phi_sd * phi_sd)
    for i in range(off[10], off[11]):
        gt[i] = -(flat[i] - noise_mean) / (noise_sd * noise_sd)
    gt[off[11]] = (da_shape - 1.0) / flat[off[11]] - da_rate

    phi = flat[off[9]]
    n_noise = off[11] - off[10]
    for m in range(M):
        s0 = starts[m]
        s1 = starts[m + 1]
        T = s1 - s0
        r0 = flat[off[0] + m]
        psi = flat[off[8] + m]
        ni = off[10] + (m if n_noise > 1 else 0)
        noise = flat[ni]
        rt = np.empty(T)
        sig = np.empty(T)
        scale = np.empty(T)
        for t in range(T):
            u = 0.0
            for kk in range(K):
                u -= (flat[off[2] + kk] + flat[off[5] + kk * M + m]) * xs[kk, s0 + t]
                u -= flat[off[6] + kk * M + m] * zs[kk, s0 + t]
            sig[t] = 1.0 / (1.0 + math.exp(-u))
            rt[t] = r0 * 2.0 * sig[t]
            scale[t] = psi * noise * base[s0 + t]
        ll, d_seed, d_rt, d_scale, d_phi = _state_loglik_grad(
            flat[off[7] + m], n_seed, rt, g, pi, pops[m], scale, obs[s0:s1],
            los[m], his[m], phi, quadratic)
        if not math.isfinite(ll):
            grad[:] = np.nan
            return -np.inf, grad
        lp += ll
        acc_r0 = 0.0
        acc_scale = 0.0
        for t in range(T):
            d_u = d_rt[t] * rt[t] * (1.0 - sig[t])
            acc_r0 += d_rt[t] * rt[t]
            acc_scale += d_scale[t] * scale[t]
            for kk in range(K):
                e = -xs[kk, s0 + t] * d_u
                gt[off[2] + kk] += e
                gt[off[5] + kk * M + m] += e
                gt[off[6] + kk * M + m] -= zs[kk, s0 + t] * d_u
        gt[off[0] + m] += acc_r0 / r0
        gt[off[7] + m] += d_seed
        gt[off[8] + m] += acc_scale / psi
        gt[ni] += acc_scale / noise
        gt[off[9]] += d_phi

    # chain rule to unconstrained coordinates plus the Jacobian term
    for i in range(n):
        grad[i] = gt[i]
    for b in (0, 1, 3, 4, 7, 9, 10, 11):
        for i in range(off[b], off[b + 1]):
            grad[i] = gt[i] * flat[i] + 1.0
    for i in range(off[8], off[9]):
        q = flat[i]
        grad[i] = gt[i] * q * (1.0 - q) + 1.0 - 2.0 * q
    # non-centred rows: standard-normal prior on v, likelihood through sigma * v
    acc_b = 0.0
    for i in range(off[5], off[6]):
        if not cen_b[(i - off[5]) // M]:
            grad[i] = gt[i] * sb - v[i]
            acc_b += gt[i] * v[i]
    grad[off[3]] += sb * acc_b
    acc_g = 0.0
    for i in range(off[6], off[7]):
        if not cen_g[(i - off[6]) // M]:
            grad[i] = gt[i] * sg - v[i]
            acc_g += gt[i] * v[i]
    grad[off[4]] += sg * acc_g
    return lp + log_jac, grad


class HierarchicalModel:
    """Joint posterior over all states for fixed data and delay pmfs.

    Parameters
    ----------
    states
        Ingested states, each over its own modelled window.
    pi, g
        Infection-to-death and serial-interval pmfs.
    reported_fraction
        Per state, the cumulative reported proportion ``P_t`` for each day of
        the window (all ones when no delay correction is applied).
    """

    def __init__(self, states: list[StateData], pi: DiscretePmf, g: DiscretePmf,
                 reported_fraction=None, prior: PriorSpec = PriorSpec(),
                 dispersion_form: str = "linear", shared_ifr_noise: bool = False,
                 centered=False):
        if dispersion_form not in DISPERSION_FORMS:
            raise ValueError(f"dispersion_form must be one of {DISPERSION_FORMS}")
        self.states = list(states)
        self.pi = pi
        self.g = g
        self.prior = prior
        self.dispersion_form = dispersion_form
        self.layout = ParamLayout([s.name for s in self.states], shared_ifr_noise, centered)
        if reported_fraction is None:
            reported_fraction = [np.ones(s.days) for s in self.states]
        self.reported_fraction = [np.ascontiguousarray(p, dtype=np.float64)
                                  for p in reported_fraction]
        for s, p in zip(self.states, self.reported_fraction):
            if p.shape != (s.days,):
                raise ValueError(f"{s.name}: reported fraction must cover the {s.days}-day window")
            if s.days < SEED_DAYS:
                raise ValueError(f"{s.name}: window shorter than the seeding period")
        self._obs = [s.deaths.astype(np.float64) for s in self.states]
        self._x = [np.ascontiguousarray(s.mobility.indicators) for s in self.states]
        self._z = [np.ascontiguousarray(s.mobility.dummies) for s in self.states]
        self._bounds = [(s.fit_start, max(s.fit_start, s.days - 2)) for s in self.states]
        self._g = np.ascontiguousarray(g.mass)
        self._pi = np.ascontiguousarray(pi.mass)
        self._hyper = np.array([getattr(prior, f.name) for f in fields(PriorSpec)])
        self._ifr = np.array([s.ifr for s in self.states])
        self._target = None

    @property
    def dim(self) -> int:
        return self.layout.size

    def rt(self, theta: ParamVector, m: int) -> np.ndarray:
        u = -((theta.alpha + theta.beta[:, m]) @ self._x[m] + theta.gamma[:, m] @ self._z[m])
        return theta.r0[m] * 2.0 * expit(u)

    def state_loglik(self, theta: ParamVector, m: int) -> float:
        st = self.states[m]
        scale = theta.psi[m] * st.ifr * theta.ifr_noise_for(m) * self.reported_fraction[m]
        lo, hi = self._bounds[m]
        return _state_loglik(float(theta.seed[m]), SEED_DAYS, self.rt(theta, m), self._g,
                             self._pi, float(st.population), scale, self._obs[m], lo, hi,
                             float(theta.phi), self.dispersion_form == "quadratic")

    def log_likelihood(self, theta: ParamVector) -> float:
        total = 0.0
        for m in range(self.layout.n_states):  # fixed order
            total += self.state_loglik(theta, m)
        return total

    def log_prior(self, theta: ParamVector) -> float:
        return log_prior(theta, self.prior)

    def log_posterior(self, theta: ParamVector) -> float:
        lp = self.log_prior(theta)
        if not math.isfinite(lp):
            return lp
        return lp + self.log_likelihood(theta)

    def log_density(self, v: np.ndarray) -> float:
        """Log-posterior plus log-Jacobian at an unconstrained point (sampler target)."""
        lay = self.layout
        flat = lay.constrain(v)
        if not lay.in_domain(flat):
            return -math.inf
        lp = _flat_log_prior(flat, lay.offsets, self._hyper)
        if not math.isfinite(lp):
            return lp if lp == -math.inf else math.nan
        sl = lay.slices
        r0, seed, psi = flat[sl["r0"]], flat[sl["seed"]], flat[sl["psi"]]
        eff = (flat[sl["alpha"]][:, None] + flat[sl["beta"]].reshape(N_COVARIATES, -1))
        gam = flat[sl["gamma"]].reshape(N_COVARIATES, -1)
        noise = np.broadcast_to(flat[sl["ifr_noise"]], r0.shape)
        phi = float(flat[sl["phi"]][0])
        quadratic = self.dispersion_form == "quadratic"
        for m, st in enumerate(self.states):
            u = -(eff[:, m] @ self._x[m] + gam[:, m] @ self._z[m])
            rt = r0[m] * 2.0 * expit(u)
            scale = psi[m] * self._ifr[m] * noise[m] * self.reported_fraction[m]
            lo, hi = self._bounds[m]
            lp += _state_loglik(float(seed[m]), SEED_DAYS, rt, self._g, self._pi,
                                float(st.population), scale, self._obs[m], lo, hi, phi, quadratic)
        return lp + lay.log_jacobian(v)

    def compiled_target(self) -> tuple:
        """``(function, data)`` pair for compiled samplers: ``function(v, data)``
        returns the log density and its gradient."""
        if self._target is None:
            starts = np.concatenate([[0], np.cumsum([s.days for s in self.states])]).astype(np.int64)
            data = (
                self.layout.offsets, self._hyper, self._g, self._pi, SEED_DAYS, starts,
                np.array([float(s.population) for s in self.states]),
                np.concatenate([ifr * p for ifr, p in zip(self._ifr, self.reported_fraction)]),
                np.concatenate(self._obs),
                np.ascontiguousarray(np.concatenate(self._x, axis=1)),
                np.ascontiguousarray(np.concatenate(self._z, axis=1)),
                np.array([b[0] for b in self._bounds], dtype=np.int64),
                np.array([b[1] for b in self._bounds], dtype=np.int64),
                self.dispersion_form == "quadratic",
                self.layout.center["beta"].copy(),
                self.layout.center["gamma"].copy(),
            )
            self._target = (_log_density_grad, data)
        return self._target

    def log_density_and_grad(self, v: np.ndarray) -> tuple[float, np.ndarray]:
        """:meth:`log_density` and its gradient in unconstrained coordinates."""
        fn, data = self.compiled_target()
        return fn(np.ascontiguousarray(v, dtype=np.float64), data)

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        """Unconstrained prior draw."""
        return self.layout.unconstrain(sample_prior(self.layout, self.prior, rng))

    def latent(self, theta: ParamVector, m: int) -> dict[str, np.ndarray]:
        """Infections, Rt, expected deaths and expected reported deaths for one state."""
        from .observation import apply_reporting_factors, expected_deaths
        from .renewal import simulate_state

        st = self.states[m]
        rt = self.rt(theta, m)
        inf = simulate_state(float(theta.seed[m]), st.days, self.g, rt, st.population)
        d = expected_deaths(inf, self.pi, st.ifr * theta.ifr_noise_for(m))
        return {
            "infections": inf.c,
            "rt": rt,
            "deaths": d,
            "reported_deaths": apply_reporting_factors(d, theta.psi[m], self.reported_fraction[m]),
        }


def log_posterior(theta: ParamVector, model: HierarchicalModel) -> float:
    return model.log_posterior(theta)
