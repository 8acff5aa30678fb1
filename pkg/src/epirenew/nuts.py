"""No-U-turn Hamiltonian Monte Carlo, compiled end to end.

The target is a pair ``(fn, data)`` where ``fn`` is a numba-jitted function
with signature ``fn(x, data) -> (log_density, gradient)``.  Each chain runs
entirely in compiled code: multinomial trajectory sampling, the generalized
U-turn criterion with the extra checks across subtree boundaries, a dense or
diagonal Euclidean metric, and dual-averaging step-size adaptation with the
usual fast/slow/fast warmup (initial step-size buffer, doubling metric
windows, terminal step-size buffer).

Subtrees are built iteratively.  Momenta and running momentum sums of the
current subtree are stored so the U-turn checks of every completed
sub-subtree can be made as soon as its last leapfrog step is taken, which
matches the early termination of the recursive formulation.
"""

from __future__ import annotations

import math

import numba
import numpy as np
from scipy import optimize

MAX_ENERGY_ERROR = 1000.0
_LOG_08 = math.log(0.8)


@numba.njit(cache=True, error_model="numpy")
def _logaddexp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    m = max(a, b)
    return m + math.log(math.exp(a - m) + math.exp(b - m))


@numba.njit(cache=True, error_model="numpy")
def _no_uturn(rho, p_sharp_a, p_sharp_b):
    return np.dot(rho, p_sharp_a) > 0.0 and np.dot(rho, p_sharp_b) > 0.0


@numba.njit(cache=True, error_model="numpy")
def _leapfrog(fn, data, x, p, grad, eps, inv_metric):
    """One leapfrog step; returns ``(x, p, grad, lp)`` with ``lp = -inf`` on failure."""
    p_half = p + 0.5 * eps * grad
    x_new = x + eps * (inv_metric @ p_half)
    lp, g_new = fn(x_new, data)
    if not math.isfinite(lp):
        return x_new, p_half, grad, -np.inf
    for v in g_new:
        if not math.isfinite(v):
            return x_new, p_half, grad, -np.inf
    return x_new, p_half + 0.5 * eps * g_new, g_new, lp


@numba.njit(cache=True, error_model="numpy")
def _transition(fn, data, x, lp, grad, eps, inv_metric, chol_metric, max_depth,
                buf_p, buf_rho):
    """One NUTS transition.

    Returns ``(x, lp, grad, mean_accept, n_steps, divergent, depth)``.
    """
    d = x.size
    p0 = chol_metric @ np.random.standard_normal(d)
    h0 = -lp + 0.5 * np.dot(p0, inv_metric @ p0)

    # trajectory ends: position, momentum, gradient, log density
    xl, pl, gl, lpl = x, p0, grad, lp
    xr, pr, gr, lpr = x, p0, grad, lp
    xs, lps, gs = x, lp, grad
    rho = p0.copy()
    log_w = 0.0
    acc_sum = 0.0
    n_steps = 0
    divergent = False
    depth = 0
    while depth < max_depth:
        direction = 1 if np.random.random() < 0.5 else -1
        if direction > 0:
            xc, pc, gc, lpc = xr, pr, gr, lpr
        else:
            xc, pc, gc, lpc = xl, pl, gl, lpl
        n = 1 << depth
        sub_log_w = -np.inf
        sub_x, sub_lp, sub_g = xc, lpc, gc
        stop = False
        first_p = pc
        for i in range(n):
            xc, pc, gc, lpc = _leapfrog(fn, data, xc, pc, gc, direction * eps, inv_metric)
            n_steps += 1
            if lpc == -np.inf:
                err = np.inf
            else:
                err = (-lpc + 0.5 * np.dot(pc, inv_metric @ pc)) - h0
            if not err < MAX_ENERGY_ERROR:
                divergent = True
                stop = True
                break
            acc_sum += 1.0 if err <= 0.0 else math.exp(-err)
            if i == 0:
                first_p = pc
            # streaming multinomial choice within the subtree
            w = -err
            sub_log_w = _logaddexp(sub_log_w, w)
            if math.log(np.random.random()) < w - sub_log_w:
                sub_x, sub_lp, sub_g = xc, lpc, gc
            buf_p[i] = pc
            if i == 0:
                buf_rho[i] = pc
            else:
                buf_rho[i] = buf_rho[i - 1] + pc
            # check every sub-subtree that ends at this step, smallest first
            size = 2
            while size <= i + 1 and (i + 1) % size == 0:
                start = i + 1 - size
                mid = start + size // 2
                r_all = buf_rho[i].copy()
                r_a = buf_rho[mid - 1].copy()
                if start > 0:
                    r_all -= buf_rho[start - 1]
                    r_a -= buf_rho[start - 1]
                r_b = buf_rho[i] - buf_rho[mid - 1]
                pa = inv_metric @ buf_p[start]
                pb = inv_metric @ buf_p[i]
                pm0 = inv_metric @ buf_p[mid - 1]
                pm1 = inv_metric @ buf_p[mid]
                if not (_no_uturn(r_all, pa, pb) and _no_uturn(r_a + buf_p[mid], pa, pm1)
                        and _no_uturn(r_b + buf_p[mid - 1], pm0, pb)):
                    stop = True
                    break
                size *= 2
            if stop:
                break
        if stop:
            break
        # biased progressive sampling toward the new subtree
        if math.log(np.random.random()) < sub_log_w - log_w:
            xs, lps, gs = sub_x, sub_lp, sub_g
        log_w = _logaddexp(log_w, sub_log_w)
        sub_rho = buf_rho[n - 1].copy()
        if direction > 0:
            inner_old_p, inner_new_p = pr, first_p
            xr, pr, gr, lpr = xc, pc, gc, lpc
        else:
            inner_old_p, inner_new_p = pl, first_p
            xl, pl, gl, lpl = xc, pc, gc, lpc
        old_rho = rho
        rho = old_rho + sub_rho
        ps_l = inv_metric @ pl
        ps_r = inv_metric @ pr
        ok = _no_uturn(rho, ps_l, ps_r)
        # across the junction: old tree plus the first new state, and the
        # new subtree plus the old edge state
        if direction > 0:
            ok = ok and _no_uturn(old_rho + inner_new_p, ps_l, inv_metric @ inner_new_p)
            ok = ok and _no_uturn(sub_rho + inner_old_p, inv_metric @ inner_old_p, ps_r)
        else:
            ok = ok and _no_uturn(sub_rho + inner_old_p, ps_l, inv_metric @ inner_old_p)
            ok = ok and _no_uturn(old_rho + inner_new_p, inv_metric @ inner_new_p, ps_r)
        depth += 1
        if not ok:
            break
    return xs, lps, gs, acc_sum / max(n_steps, 1), n_steps, divergent, depth


@numba.njit(cache=True, error_model="numpy")
def _find_step(fn, data, x, lp, grad, inv_metric, chol_metric):
    """Double or halve a trial step until one leapfrog crosses acceptance 0.8."""
    eps = 1.0
    p = chol_metric @ np.random.standard_normal(x.size)
    h0 = -lp + 0.5 * np.dot(p, inv_metric @ p)
    up = True
    for it in range(60):
        x1, p1, g1, lp1 = _leapfrog(fn, data, x, p, grad, eps, inv_metric)
        r = -np.inf if lp1 == -np.inf else h0 - (-lp1 + 0.5 * np.dot(p1, inv_metric @ p1))
        if it == 0:
            up = r > _LOG_08
        if up and not r > _LOG_08:
            return eps / 2.0
        if not up and r > _LOG_08:
            return eps
        eps = eps * 2.0 if up else eps / 2.0
    return eps


def warmup_windows(n_warmup: int) -> tuple[int, np.ndarray]:
    """Initial buffer length and metric-window end points (doubling windows)."""
    init_buf, term_buf, base = 75, 50, 25
    if n_warmup < init_buf + term_buf + base:
        init_buf = int(0.15 * n_warmup)
        term_buf = int(0.1 * n_warmup)
        base = n_warmup - init_buf - term_buf
    end = n_warmup - term_buf
    ends = []
    size = base
    pos = init_buf
    while pos < end:
        nxt = pos + size
        # absorb a remainder shorter than the next window
        if end - nxt < 2 * size:
            nxt = end
        ends.append(nxt)
        pos = nxt
        size *= 2
    return init_buf, np.array(ends, dtype=np.int64)


# nogil: chains run in parallel threads, each with numba's per-thread generator
@numba.njit(cache=True, nogil=True, error_model="numpy")
def _chain(fn, data, x0, inv_metric0, n_warmup, n_samples, target, max_depth, dense, seed,
           init_buf, window_ends, early_depth):
    np.random.seed(seed)
    d = x0.size
    max_steps = 1 << max(max_depth - 1, 0)
    buf_p = np.empty((max_steps, d))
    buf_rho = np.empty((max_steps, d))
    inv_metric = inv_metric0.copy()
    chol_metric = np.linalg.cholesky(np.linalg.inv(inv_metric))
    warm_steps = 0
    warm_trace = np.zeros(max(n_warmup, 1), dtype=np.int64)
    lp, grad = fn(x0, data)
    x = x0.copy()
    eps = _find_step(fn, data, x, lp, grad, inv_metric, chol_metric)
    # dual averaging
    mu = math.log(10.0 * eps)
    t_da = 0
    h_bar = 0.0
    log_eps_bar = 0.0
    window = np.empty((max(n_warmup, 1), d))
    n_win = 0
    w_i = 0
    last_end = window_ends[-1] if window_ends.size > 0 else 0
    # trees are capped until the last metric window opens
    early_end = window_ends[-2] if window_ends.size > 1 else 0
    for it in range(n_warmup):
        depth_cap = min(early_depth, max_depth) if it < early_end else max_depth
        x, lp, grad, acc, nst, _, _ = _transition(fn, data, x, lp, grad, eps, inv_metric,
                                                  chol_metric, depth_cap, buf_p, buf_rho)
        warm_steps += nst
        warm_trace[it] = nst
        t_da += 1
        h_bar += ((target - acc) - h_bar) / (t_da + 10.0)
        log_eps = mu - math.sqrt(t_da) / 0.05 * h_bar
        wt = t_da ** -0.75
        log_eps_bar = wt * log_eps + (1.0 - wt) * log_eps_bar
        eps = math.exp(log_eps)
        if init_buf <= it < last_end:
            window[n_win] = x
            n_win += 1
        if w_i < window_ends.size and it + 1 == window_ends[w_i]:
            nw = float(n_win)
            mean = np.zeros(d)
            for j in range(n_win):
                mean += window[j]
            mean /= nw
            cov = np.zeros((d, d))
            for j in range(n_win):
                dev = window[j] - mean
                cov += np.outer(dev, dev)
            cov /= max(nw - 1.0, 1.0)
            if dense:
                # short windows cannot pin down d*(d+1)/2 entries, so lean on
                # the previous metric until the window is several times d
                w = nw / (nw + 2.0 * d)
                cov = w * cov + (1.0 - w) * inv_metric
            else:
                shrink = nw / (nw + 5.0)
                reg = 1e-3 * (5.0 / (nw + 5.0))
                diag = np.diag(cov).copy()
                cov = np.diag(shrink * diag + reg)
            inv_metric = cov
            chol_metric = np.linalg.cholesky(np.linalg.inv(cov))
            n_win = 0
            w_i += 1
            eps = _find_step(fn, data, x, lp, grad, inv_metric, chol_metric)
            mu = math.log(10.0 * eps)
            t_da = 0
            h_bar = 0.0
            log_eps_bar = 0.0
    if n_warmup > 0:
        eps = math.exp(log_eps_bar)

    out = np.empty((n_samples, d))
    out_lp = np.empty(n_samples)
    depths = np.empty(n_samples, dtype=np.int64)
    steps = np.empty(n_samples, dtype=np.int64)
    divs = np.zeros(n_samples, dtype=np.bool_)
    n_div = 0
    acc_total = 0.0
    for s in range(n_samples):
        x, lp, grad, acc, nst, div, depth = _transition(
            fn, data, x, lp, grad, eps, inv_metric, chol_metric, max_depth, buf_p, buf_rho)
        out[s] = x
        out_lp[s] = lp
        depths[s] = depth
        steps[s] = nst
        acc_total += acc
        n_div += div
        divs[s] = div
    return (out, out_lp, acc_total / max(n_samples, 1), eps, n_div, depths, steps,
            inv_metric, warm_steps, divs, warm_trace)


def laplace_start(target, x0, dense: bool, max_iter: int = 500):
    """Move ``x0`` to a nearby mode and return ``(x, inverse metric)``.

    The metric is the inverse of the negative Hessian there (central
    differences of the gradient), or its diagonal, clipped to a sane range.
    Falls back to ``x0`` and the identity when the optimizer or the Hessian
    misbehave.
    """
    fn, data = target
    d = x0.size
    eye = np.eye(d)

    def neg(x):
        lp, g = fn(np.ascontiguousarray(x), data)
        if not math.isfinite(lp):
            return 1e300, np.zeros(d)
        return -lp, -g

    res = optimize.minimize(neg, x0, jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter})
    x = res.x if np.all(np.isfinite(res.x)) and res.fun < neg(x0)[0] else x0
    h = 1e-5
    hess = np.empty((d, d))
    for j in range(d):
        step = h * max(1.0, abs(x[j]))
        gp = fn(x + step * eye[j], data)[1]
        gm = fn(x - step * eye[j], data)[1]
        hess[j] = (gp - gm) / (2 * step)
    hess = -0.5 * (hess + hess.T)
    if not np.all(np.isfinite(hess)):
        return x0, eye
    vals, vecs = np.linalg.eigh(hess)
    # precision eigenvalues clipped to variances in [1e-6, 1e2]
    vals = np.clip(vals, 1e-2, 1e6)
    cov = (vecs / vals) @ vecs.T
    if not dense:
        cov = np.diag(np.diag(cov))
    return np.ascontiguousarray(x), cov


def nuts_chain(target, x0, n_warmup: int, n_samples: int, accept_target: float,
               max_depth: int, dense: bool, seed: int, laplace: bool = True,
               early_depth: int = 5):
    """Run one chain on a compiled ``(fn, data)`` target.

    ``seed`` seeds the compiled generator for this chain.  With ``laplace``
    the chain starts from the mode nearest ``x0`` with a Hessian-based
    metric (see :func:`laplace_start`).  Until the last metric window opens,
    trees are capped at ``early_depth`` doublings: early iterations only need
    to reach the typical set and feed the covariance estimate, and a poor
    initial metric otherwise buys very long trajectories.  Returns
    ``(draws, log_density, mean_accept, step_size, info)``.
    """
    fn, data = target
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    if laplace and n_warmup > 0:
        x0, inv_metric = laplace_start(target, x0, dense)
    else:
        inv_metric = np.eye(x0.size)
    init_buf, ends = warmup_windows(n_warmup)
    out, out_lp, acc, eps, n_div, depths, steps, _, warm_steps, divs, warm_trace = _chain(
        fn, data, x0, inv_metric, n_warmup, n_samples,
        accept_target, max_depth, dense, seed, init_buf, ends, early_depth)
    info = {
        "warmup_steps": int(warm_steps),
        "divergent_draws": divs,
        "warmup_trace": warm_trace[:n_warmup],
        "divergent": int(n_div),
        "max_depth_hits": int(np.sum(depths >= max_depth)),
        "mean_depth": float(depths.mean()) if n_samples else 0.0,
        "mean_steps": float(steps.mean()) if n_samples else 0.0,
    }
    return out, out_lp, acc, eps, info
