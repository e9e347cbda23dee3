"""Numeric hot loops with a numba path and a pure-numpy fallback.

The backend is picked once at import time.  Set ``TSCOPULA_DISABLE_NUMBA=1``
to force the numpy implementations (useful for debugging and for the
benchmark in ``benchmarks/bench_kernels.py``).  Both implementations are
always importable as ``NUMPY_KERNELS`` / ``NUMBA_KERNELS`` so they can be
compared side by side.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("TSCOPULA_DISABLE_NUMBA", "").lower() not in {"1", "true", "yes"}

# Bisection stops when the bracket is this narrow (absolute, in x units).
BISECT_XTOL = 1e-13
BISECT_MAX_ITER = 200
BRACKET_LIMIT = 1e8


# ---------------------------------------------------------------------------
# pure numpy implementations
# ---------------------------------------------------------------------------


def _np_log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _np_dsf_cdf(a, b, logw, x):
    """Evaluate the [0,1]-valued DSF at ``x`` of shape ``(S, d)``.

    ``a``, ``b`` and ``logw`` have shape ``(d, L, H)``; ``logw`` holds
    log-softmax mixture weights.
    """
    h = np.asarray(x, dtype=np.float64)
    n_layers = a.shape[1]
    out = h
    for layer in range(n_layers):
        z = a[None, :, layer, :] * h[..., None] + b[None, :, layer, :]
        lw = logw[None, :, layer, :]
        log_y = np.logaddexp.reduce(lw + _np_log_sigmoid(z), axis=-1)
        if layer == n_layers - 1:
            out = np.exp(log_y)
        else:
            log_1my = np.logaddexp.reduce(lw + _np_log_sigmoid(-z), axis=-1)
            h = log_y - log_1my
    return out


def _np_dsf_inverse(a, b, logw, u):
    u = np.asarray(u, dtype=np.float64)
    lo = np.full(u.shape, -1.0)
    hi = np.full(u.shape, 1.0)
    ok = np.ones(u.shape, dtype=np.bool_)
    # expand brackets until they contain the target level
    while True:
        f_lo = _np_dsf_cdf(a, b, logw, lo)
        need = (f_lo > u) & ok
        if not need.any():
            break
        lo = np.where(need, lo * 2.0, lo)
        ok &= np.abs(lo) <= BRACKET_LIMIT
    while True:
        f_hi = _np_dsf_cdf(a, b, logw, hi)
        need = (f_hi < u) & ok
        if not need.any():
            break
        hi = np.where(need, hi * 2.0, hi)
        ok &= np.abs(hi) <= BRACKET_LIMIT
    for _ in range(BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        f_mid = _np_dsf_cdf(a, b, logw, mid)
        below = f_mid < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= BISECT_XTOL * np.maximum(1.0, np.abs(mid))):
            break
    x = 0.5 * (lo + hi)
    return np.where(ok, x, np.nan), ok


def _np_crps_rows(samples, truth):
    """CRPS of the empirical distribution of each row against ``truth``."""
    s = np.sort(np.asarray(samples, dtype=np.float64), axis=1)
    m = s.shape[1]
    abs_err = np.abs(s - truth[:, None]).mean(axis=1)
    weights = (2.0 * np.arange(1, m + 1) - m - 1.0) / (m * m)
    spread = s @ weights
    return abs_err - spread


def _np_energy_score(samples, truth, chunk=512):
    x = np.asarray(samples, dtype=np.float64)
    m = x.shape[0]
    first = np.linalg.norm(x - truth[None, :], axis=1).mean()
    if m < 2:
        return first
    total = 0.0
    for start in range(0, m, chunk):
        block = x[start : start + chunk]
        d = np.sqrt(((block[:, None, :] - x[None, :, :]) ** 2).sum(axis=-1))
        total += d.sum()
    pair_mean = total / (m * (m - 1))  # each unordered pair counted twice
    return first - 0.5 * pair_mean


def _np_newey_west_var(values, lags):
    x = np.asarray(values, dtype=np.float64)
    t = x.shape[0]
    e = x - x.mean()
    var = e @ e / t
    for lag in range(1, lags + 1):
        gamma = e[lag:] @ e[:-lag] / t
        var += 2.0 * (1.0 - lag / (lags + 1.0)) * gamma
    return var / t


def _np_clayton_logpdf(theta, u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    lu = np.log(u)
    lv = np.log(v)
    a = -theta * lu
    b = -theta * lv
    if theta > 0:
        lse = np.logaddexp(a, b)
        log_s = lse + np.log1p(-np.exp(-lse))
        valid = np.ones(np.broadcast(u, v).shape, dtype=np.bool_)
    else:
        s = np.expm1(a) + np.exp(b)
        valid = s > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            log_s = np.log(np.where(valid, s, 1.0))
    out = math.log1p(theta) + (-theta - 1.0) * (lu + lv) + (-2.0 - 1.0 / theta) * log_s
    return np.where(valid, out, -np.inf)


def _np_clayton_conditional_inverse(theta, u, w):
    u = np.asarray(u, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    a = -theta * np.log(u)
    c = (-theta / (1.0 + theta)) * np.log(w)
    if theta > 0:
        log_inner = np.logaddexp(0.0, a + np.log(np.expm1(c)))
    else:
        log_inner = np.log1p(np.exp(a) * np.expm1(c))
    return np.exp(-log_inner / theta)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:
    _jit = numba.njit(cache=True, fastmath=False)

    @_jit
    def _nb_log_sigmoid(z):
        if z >= 0.0:
            return -math.log1p(math.exp(-z))
        return z - math.log1p(math.exp(z))

    @_jit
    def _nb_dsf_cdf_scalar(a, b, logw, j, x):
        n_layers = a.shape[1]
        n_hidden = a.shape[2]
        h = x
        for layer in range(n_layers):
            # two log-sum-exp accumulators: log y and log(1 - y)
            m1 = -np.inf
            m2 = -np.inf
            for k in range(n_hidden):
                z = a[j, layer, k] * h + b[j, layer, k]
                t1 = logw[j, layer, k] + _nb_log_sigmoid(z)
                t2 = logw[j, layer, k] + _nb_log_sigmoid(-z)
                if t1 > m1:
                    m1 = t1
                if t2 > m2:
                    m2 = t2
            s1 = 0.0
            s2 = 0.0
            for k in range(n_hidden):
                z = a[j, layer, k] * h + b[j, layer, k]
                s1 += math.exp(logw[j, layer, k] + _nb_log_sigmoid(z) - m1)
                s2 += math.exp(logw[j, layer, k] + _nb_log_sigmoid(-z) - m2)
            log_y = m1 + math.log(s1)
            if layer == n_layers - 1:
                return math.exp(log_y)
            h = log_y - (m2 + math.log(s2))
        return h

    @_jit
    def _nb_dsf_cdf(a, b, logw, x):
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                out[i, j] = _nb_dsf_cdf_scalar(a, b, logw, j, x[i, j])
        return out

    @_jit
    def _nb_dsf_inverse(a, b, logw, u):
        out = np.empty_like(u)
        ok = np.ones(u.shape, dtype=np.bool_)
        for i in range(u.shape[0]):
            for j in range(u.shape[1]):
                target = u[i, j]
                lo = -1.0
                hi = 1.0
                good = True
                while _nb_dsf_cdf_scalar(a, b, logw, j, lo) > target:
                    lo *= 2.0
                    if abs(lo) > BRACKET_LIMIT:
                        good = False
                        break
                while good and _nb_dsf_cdf_scalar(a, b, logw, j, hi) < target:
                    hi *= 2.0
                    if abs(hi) > BRACKET_LIMIT:
                        good = False
                        break
                if not good:
                    out[i, j] = np.nan
                    ok[i, j] = False
                    continue
                for _ in range(BISECT_MAX_ITER):
                    mid = 0.5 * (lo + hi)
                    if _nb_dsf_cdf_scalar(a, b, logw, j, mid) < target:
                        lo = mid
                    else:
                        hi = mid
                    if hi - lo <= BISECT_XTOL * max(1.0, abs(mid)):
                        break
                out[i, j] = 0.5 * (lo + hi)
        return out, ok

    @_jit
    def _nb_crps_rows(samples, truth):
        k, m = samples.shape
        out = np.empty(k)
        for r in range(k):
            s = np.sort(samples[r])
            abs_err = 0.0
            spread = 0.0
            for i in range(m):
                abs_err += abs(s[i] - truth[r])
                spread += (2.0 * (i + 1) - m - 1.0) * s[i]
            out[r] = abs_err / m - spread / (m * m)
        return out

    @_jit
    def _nb_energy_score(samples, truth):
        m, dim = samples.shape
        first = 0.0
        for i in range(m):
            acc = 0.0
            for c in range(dim):
                diff = samples[i, c] - truth[c]
                acc += diff * diff
            first += math.sqrt(acc)
        first /= m
        if m < 2:
            return first
        pairs = 0.0
        for i in range(m):
            for j in range(i + 1, m):
                acc = 0.0
                for c in range(dim):
                    diff = samples[i, c] - samples[j, c]
                    acc += diff * diff
                pairs += math.sqrt(acc)
        return first - 0.5 * pairs / (m * (m - 1) / 2.0)

    @_jit
    def _nb_newey_west_var(values, lags):
        t = values.shape[0]
        mean = 0.0
        for i in range(t):
            mean += values[i]
        mean /= t
        var = 0.0
        for i in range(t):
            var += (values[i] - mean) ** 2
        var /= t
        for lag in range(1, lags + 1):
            gamma = 0.0
            for i in range(lag, t):
                gamma += (values[i] - mean) * (values[i - lag] - mean)
            var += 2.0 * (1.0 - lag / (lags + 1.0)) * gamma / t
        return var / t

    @_jit
    def _nb_clayton_logpdf(theta, u, v):
        out = np.empty(u.shape[0])
        for i in range(u.shape[0]):
            lu = math.log(u[i])
            lv = math.log(v[i])
            a = -theta * lu
            b = -theta * lv
            if theta > 0:
                hi = max(a, b)
                lse = hi + math.log1p(math.exp(min(a, b) - hi))
                log_s = lse + math.log1p(-math.exp(-lse))
            else:
                s = math.expm1(a) + math.exp(b)
                if s <= 0.0:
                    out[i] = -np.inf
                    continue
                log_s = math.log(s)
            out[i] = math.log1p(theta) + (-theta - 1.0) * (lu + lv) + (-2.0 - 1.0 / theta) * log_s
        return out

    @_jit
    def _nb_clayton_conditional_inverse(theta, u, w):
        out = np.empty(u.shape[0])
        for i in range(u.shape[0]):
            a = -theta * math.log(u[i])
            c = (-theta / (1.0 + theta)) * math.log(w[i])
            if theta > 0:
                z = a + math.log(math.expm1(c))
                if z > 0:
                    log_inner = z + math.log1p(math.exp(-z))
                else:
                    log_inner = math.log1p(math.exp(z))
            else:
                log_inner = math.log1p(math.exp(a) * math.expm1(c))
            out[i] = math.exp(-log_inner / theta)
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

NUMPY_KERNELS = {
    "dsf_cdf": _np_dsf_cdf,
    "dsf_inverse": _np_dsf_inverse,
    "crps_rows": _np_crps_rows,
    "energy_score": _np_energy_score,
    "newey_west_var": _np_newey_west_var,
    "clayton_logpdf": _np_clayton_logpdf,
    "clayton_conditional_inverse": _np_clayton_conditional_inverse,
}

if HAS_NUMBA:

    def _flat(fn):
        # numba kernels take 1-d float arrays; accept any shape like numpy does
        def wrapper(theta, u, v):
            u_arr, v_arr = np.broadcast_arrays(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64))
            res = fn(float(theta), np.ascontiguousarray(u_arr).ravel(), np.ascontiguousarray(v_arr).ravel())
            return res.reshape(u_arr.shape)

        return wrapper

    def _as2d(fn):
        def wrapper(a, b, logw, x):
            arr = np.ascontiguousarray(x, dtype=np.float64)
            return fn(
                np.ascontiguousarray(a, dtype=np.float64),
                np.ascontiguousarray(b, dtype=np.float64),
                np.ascontiguousarray(logw, dtype=np.float64),
                arr,
            )

        return wrapper

    NUMBA_KERNELS = {
        "dsf_cdf": _as2d(_nb_dsf_cdf),
        "dsf_inverse": _as2d(_nb_dsf_inverse),
        "crps_rows": lambda s, t: _nb_crps_rows(
            np.ascontiguousarray(s, dtype=np.float64), np.ascontiguousarray(t, dtype=np.float64)
        ),
        "energy_score": lambda s, t: _nb_energy_score(
            np.ascontiguousarray(s, dtype=np.float64), np.ascontiguousarray(t, dtype=np.float64)
        ),
        "newey_west_var": lambda x, lags: _nb_newey_west_var(np.ascontiguousarray(x, dtype=np.float64), int(lags)),
        "clayton_logpdf": _flat(_nb_clayton_logpdf),
        "clayton_conditional_inverse": _flat(_nb_clayton_conditional_inverse),
    }
else:  # pragma: no cover
    NUMBA_KERNELS = {}

ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS
BACKEND = "numba" if USE_NUMBA else "numpy"

dsf_cdf = ACTIVE["dsf_cdf"]
dsf_inverse = ACTIVE["dsf_inverse"]
crps_rows = ACTIVE["crps_rows"]
energy_score = ACTIVE["energy_score"]
newey_west_var = ACTIVE["newey_west_var"]
clayton_logpdf = ACTIVE["clayton_logpdf"]
clayton_conditional_inverse = ACTIVE["clayton_conditional_inverse"]
