"""Compiled toy targets with known marginals for sampler calibration."""

import numba
import numpy as np


@numba.njit(cache=True)
def gaussian_fn(x, data):
    mean, precision = data
    r = x - mean
    g = -precision @ r
    return 0.5 * np.dot(r, g), g


@numba.njit(cache=True)
def logit_beta_fn(x, data):
    # Beta(a, b) on p = expit(x), Jacobian included
    a, b = data[0], data[1]
    u = x[0]
    log_p = -np.log1p(np.exp(-u)) if u > 0 else u - np.log1p(np.exp(u))
    log_q = log_p - u
    p = np.exp(log_p)
    g = np.empty(1)
    g[0] = a * (1.0 - p) - b * p
    return a * log_p + b * log_q, g


def gaussian_target(mean, cov):
    mean = np.ascontiguousarray(mean, dtype=np.float64)
    precision = np.ascontiguousarray(np.linalg.inv(cov))
    fn = gaussian_fn

    def log_density(x):
        return fn(np.ascontiguousarray(x, dtype=np.float64), (mean, precision))[0]

    return (fn, (mean, precision)), log_density


def beta_target(a, b):
    data = np.array([float(a), float(b)])

    def log_density(x):
        return logit_beta_fn(np.ascontiguousarray(x, dtype=np.float64), data)[0]

    return (logit_beta_fn, data), log_density


def example_cov(d=5, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(d, d))
    scales = np.exp(rng.uniform(-1.5, 1.5, d))
    cov = a @ a.T / d + 0.3 * np.eye(d)
    return cov * np.outer(scales, scales)
