"""Log-likelihood, gradient and Hessian kernels for the paired-comparison and ordinal models.

Each kernel exists twice: an explicit loop compiled with numba, and a
vectorized numpy version. ``HYPOFORGE_NUMBA=0`` (or numba being absent)
selects the numpy path. Both return identical quantities and are compared
in the tests.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import log_expit, ndtr

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional extra
    numba = None

ENV_FLAG = "HYPOFORGE_NUMBA"
SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def numba_enabled() -> bool:
    return numba is not None and os.environ.get(ENV_FLAG, "1") != "0"


def _jit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True)(fn)


# -- Bradley-Terry ---------------------------------------------------------------
# parameters: [alpha, beta_0 .. beta_{n-1}]; eta = use_alpha*alpha + beta_first - beta_second

def _bt_loop(first, second, y, w, alpha, beta, use_alpha):
    n = beta.shape[0]
    g = np.zeros(n + 1)
    H = np.zeros((n + 1, n + 1))
    ll = 0.0
    a = alpha if use_alpha else 0.0
    for r in range(first.shape[0]):
        i = first[r] + 1
        j = second[r] + 1
        eta = a + beta[i - 1] - beta[j - 1]
        if eta >= 0.0:
            e = math.exp(-eta)
            p = 1.0 / (1.0 + e)
            logp = -math.log1p(e)
            logq = -eta - math.log1p(e)
        else:
            e = math.exp(eta)
            p = e / (1.0 + e)
            logp = eta - math.log1p(e)
            logq = -math.log1p(e)
        ll += w[r] * (y[r] * logp + (1.0 - y[r]) * logq)
        d = w[r] * (y[r] - p)
        h = w[r] * p * (1.0 - p)
        g[i] += d
        g[j] -= d
        H[i, i] -= h
        H[j, j] -= h
        H[i, j] += h
        H[j, i] += h
        if use_alpha:
            g[0] += d
            H[0, 0] -= h
            H[0, i] -= h
            H[i, 0] -= h
            H[0, j] += h
            H[j, 0] += h
    return ll, g, H


def _bt_numpy(first, second, y, w, alpha, beta, use_alpha):
    n = beta.shape[0]
    m = first.shape[0]
    X = np.zeros((m, n + 1))
    rows = np.arange(m)
    X[rows, first + 1] += 1.0
    X[rows, second + 1] -= 1.0
    if use_alpha:
        X[:, 0] = 1.0
    theta = np.concatenate(([alpha if use_alpha else 0.0], beta))
    eta = X @ theta
    p = np.exp(log_expit(eta))
    ll = float(np.sum(w * (y * log_expit(eta) + (1.0 - y) * log_expit(-eta))))
    g = X.T @ (w * (y - p))
    H = -(X.T * (w * p * (1.0 - p))) @ X
    return ll, g, H


# -- Davidson --------------------------------------------------------------------
# parameters: [alpha, beta_0 .. beta_{n-1}, lam]; x = (use_alpha*alpha + b_i - b_j)/2,
# outcome code 1 = first wins, -1 = second wins, 0 = tie

def _dv_loop(first, second, code, w, alpha, beta, lam, use_alpha):
    n = beta.shape[0]
    P = n + 2
    L = n + 1
    g = np.zeros(P)
    H = np.zeros((P, P))
    ll = 0.0
    a = alpha if use_alpha else 0.0
    idx = np.zeros(3, dtype=np.int64)
    coef = np.zeros(3)
    for r in range(first.shape[0]):
        i = first[r] + 1
        j = second[r] + 1
        x = 0.5 * (a + beta[i - 1] - beta[j - 1])
        m = max(abs(x), lam)
        ex = math.exp(x - m)
        emx = math.exp(-x - m)
        el = math.exp(lam - m)
        Z = ex + emx + el
        tie = 1.0 if code[r] == 0 else 0.0
        yy = float(code[r])
        ll += w[r] * (yy * x + (tie * lam if tie > 0.0 else 0.0) - (m + math.log(Z)))
        dx = yy - (ex - emx) / Z
        dl = tie - el / Z
        hxx = -((ex + emx) * Z - (ex - emx) ** 2) / (Z * Z)
        hxl = (ex - emx) * el / (Z * Z)
        hll = -el * (Z - el) / (Z * Z)
        k = 2
        idx[0] = i
        idx[1] = j
        coef[0] = 0.5
        coef[1] = -0.5
        if use_alpha:
            idx[2] = 0
            coef[2] = 0.5
            k = 3
        for s in range(k):
            g[idx[s]] += w[r] * dx * coef[s]
            H[idx[s], L] += w[r] * hxl * coef[s]
            H[L, idx[s]] += w[r] * hxl * coef[s]
            for t in range(k):
                H[idx[s], idx[t]] += w[r] * hxx * coef[s] * coef[t]
        g[L] += w[r] * dl
        H[L, L] += w[r] * hll
    return ll, g, H


def _dv_numpy(first, second, code, w, alpha, beta, lam, use_alpha):
    n = beta.shape[0]
    m = first.shape[0]
    X = np.zeros((m, n + 1))
    rows = np.arange(m)
    X[rows, first + 1] += 0.5
    X[rows, second + 1] -= 0.5
    if use_alpha:
        X[:, 0] = 0.5
    x = X @ np.concatenate(([alpha if use_alpha else 0.0], beta))
    tie = (code == 0).astype(float)
    yy = code.astype(float)
    logZ = np.logaddexp(np.logaddexp(x, -x), lam)
    lam_term = np.where(tie > 0, lam, 0.0)
    ll = float(np.sum(w * (yy * x + tie * lam_term - logZ)))
    s = np.exp(np.logaddexp(x, -x) - logZ)  # (e^x + e^-x)/Z
    d = (np.exp(x - logZ) - np.exp(-x - logZ))  # (e^x - e^-x)/Z
    t = np.exp(lam - logZ)  # e^lam/Z
    dx = yy - d
    dl = tie - t
    hxx = -(s - d * d)
    hxl = d * t
    hll = -t * (1.0 - t)
    g = np.concatenate((X.T @ (w * dx), [np.sum(w * dl)]))
    H = np.zeros((n + 2, n + 2))
    H[: n + 1, : n + 1] = (X.T * (w * hxx)) @ X
    H[: n + 1, n + 1] = H[n + 1, : n + 1] = X.T @ (w * hxl)
    H[n + 1, n + 1] = np.sum(w * hll)
    return ll, g, H


# -- cumulative probit -----------------------------------------------------------
# P(Y = k) = Phi(tau_k - eta) - Phi(tau_{k-1} - eta) with tau_0 = -inf, tau_K = +inf

@_jit
def _phi_cdf(x):
    return 0.5 * math.erfc(-x / SQRT2)


@_jit
def _phi_pdf(x):
    return INV_SQRT_2PI * math.exp(-0.5 * x * x)


def _probit_loop(tau, eta, y):
    K = tau.shape[0] + 1
    gtau = np.zeros(K - 1)
    geta = np.zeros(eta.shape[0])
    ll = 0.0
    for r in range(eta.shape[0]):
        k = y[r]
        has_hi = k < K
        has_lo = k > 1
        a = tau[k - 1] - eta[r] if has_hi else 0.0
        b = tau[k - 2] - eta[r] if has_lo else 0.0
        if has_lo and b > 0.0:
            # both bounds in the upper tail: use survival functions
            p = _phi_cdf(-b) - (_phi_cdf(-a) if has_hi else 0.0)
        else:
            p = (_phi_cdf(a) if has_hi else 1.0) - (_phi_cdf(b) if has_lo else 0.0)
        fa = _phi_pdf(a) if has_hi else 0.0
        fb = _phi_pdf(b) if has_lo else 0.0
        ll += math.log(p)
        geta[r] = -(fa - fb) / p
        if has_hi:
            gtau[k - 1] += fa / p
        if has_lo:
            gtau[k - 2] -= fb / p
    return ll, gtau, geta


def _probit_numpy(tau, eta, y):
    K = tau.shape[0] + 1
    ext = np.concatenate(([-np.inf], tau, [np.inf]))
    a = ext[y] - eta
    b = ext[y - 1] - eta
    upper = b > 0
    p = np.where(upper, ndtr(-b) - ndtr(-a), ndtr(a) - ndtr(b))
    fa = np.where(np.isfinite(a), np.exp(-0.5 * np.where(np.isfinite(a), a, 0.0) ** 2) * INV_SQRT_2PI, 0.0)
    fb = np.where(np.isfinite(b), np.exp(-0.5 * np.where(np.isfinite(b), b, 0.0) ** 2) * INV_SQRT_2PI, 0.0)
    ll = float(np.sum(np.log(p)))
    geta = -(fa - fb) / p
    hi = y < K
    lo = y > 1
    gtau = np.bincount(y[hi] - 1, weights=fa[hi] / p[hi], minlength=K - 1)
    gtau -= np.bincount(y[lo] - 2, weights=fb[lo] / p[lo], minlength=K - 1)
    return ll, gtau[: K - 1], geta


bt_numba = _jit(_bt_loop)
davidson_numba = _jit(_dv_loop)
probit_numba = _jit(_probit_loop)


def _as_inputs(first, second, *arrays):
    return (np.ascontiguousarray(first, dtype=np.int64), np.ascontiguousarray(second, dtype=np.int64)) + tuple(
        np.ascontiguousarray(a, dtype=np.float64) for a in arrays
    )


def bt_loglik(first, second, y, w, alpha, beta, use_alpha, *, use_numba=None):
    """Log-likelihood, gradient and Hessian over [alpha, beta]."""
    first, second, y, w, beta = _as_inputs(first, second, y, w, beta)
    fn = bt_numba if (numba_enabled() if use_numba is None else use_numba) else _bt_numpy
    return fn(first, second, y, w, float(alpha), beta, bool(use_alpha))


def davidson_loglik(first, second, code, w, alpha, beta, lam, use_alpha, *, use_numba=None):
    """Log-likelihood, gradient and Hessian over [alpha, beta, log nu]."""
    first, second, w, beta = _as_inputs(first, second, w, beta)
    code = np.ascontiguousarray(code, dtype=np.int64)
    fn = davidson_numba if (numba_enabled() if use_numba is None else use_numba) else _dv_numpy
    return fn(first, second, code, w, float(alpha), beta, float(lam), bool(use_alpha))


def probit_loglik(tau, eta, y, *, use_numba=None):
    """Log-likelihood and its gradients with respect to thresholds and linear predictors."""
    tau = np.ascontiguousarray(tau, dtype=np.float64)
    eta = np.ascontiguousarray(eta, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    fn = probit_numba if (numba_enabled() if use_numba is None else use_numba) else _probit_numpy
    return fn(tau, eta, y)


def warm_up() -> None:
    """Trigger JIT compilation on tiny inputs."""
    if not numba_enabled():
        return
    f = np.array([0], dtype=np.int64)
    s = np.array([1], dtype=np.int64)
    one = np.ones(1)
    bt_loglik(f, s, one, one, 0.0, np.zeros(2), True)
    davidson_loglik(f, s, np.zeros(1, dtype=np.int64), one, 0.0, np.zeros(2), 0.0, True)
    probit_loglik(np.array([-0.5, 0.5]), np.zeros(1), np.array([2], dtype=np.int64))
