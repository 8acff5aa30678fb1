"""Deliberately naive reference implementations used as test oracles.

Each follows the model equations term by term with plain Python loops and
shares no code with the package.
"""

import math

from scipy.special import gammaln


def renewal(seed, rt, g_mass, population, n_seed=6):
    c = []
    for t in range(len(rt)):
        total = sum(c)
        room = max(population - total, 0.0)
        if t < n_seed:
            c.append(min(seed, room))
            continue
        conv = 0.0
        for tau in range(t):
            lag = t - tau
            if lag <= len(g_mass):
                conv += c[tau] * g_mass[lag - 1]
        s = max(0.0, 1.0 - total / population)
        c.append(min(s * rt[t] * conv, room))
    return c


def deaths(c, pi_mass, ifr):
    out = []
    for t in range(len(c)):
        acc = 0.0
        for tau in range(t):
            lag = t - tau
            if lag <= len(pi_mass):
                acc += c[tau] * pi_mass[lag - 1]
        out.append(ifr * acc)
    return out


def rt(r0, alpha, beta, gamma, x, z):
    out = []
    for t in range(len(x[0])):
        u = 0.0
        for k in range(len(alpha)):
            u -= (alpha[k] + beta[k]) * x[k][t] + gamma[k] * z[k][t]
        out.append(r0 * 2.0 / (1.0 + math.exp(-u)))
    return out


def negbin_logpmf(y, mu, phi, quadratic=False):
    r = phi if quadratic else mu * phi
    return (gammaln(y + r) - gammaln(r) - gammaln(y + 1)
            + r * math.log(r / (r + mu)) + y * math.log(mu / (r + mu)))


def state_loglik(seed, rt_series, g_mass, pi_mass, population, scale, obs, lo, hi, phi,
                 quadratic=False, n_seed=6):
    c = renewal(seed, rt_series, g_mass, population, n_seed)
    d = deaths(c, pi_mass, 1.0)
    total = 0.0
    for t in range(lo, hi):
        mu = scale[t] * d[t]
        if mu == 0:
            if obs[t] > 0:
                return -math.inf
            continue
        total += negbin_logpmf(obs[t], mu, phi, quadratic)
    return total
