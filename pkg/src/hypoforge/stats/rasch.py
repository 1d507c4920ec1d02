"""MAP fit of a cumulative-probit rating model with rater and hypothesis-on-metric effects.

P(Y <= k) = Phi(tau_k - eta), eta = beta_metric + u_rater + v_(hypothesis, metric).
Thresholds are parameterized as tau_1 plus log-increments so they stay
ordered. u and v carry Gaussian priors; the first metric is the reference
(beta = 0). Standard errors come from a Laplace approximation.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from ..core import METRICS
from ..errors import FitError, InputError
from . import _kernels

log = logging.getLogger(__name__)

GRAD_TOL = 1e-6
MAX_ITER = 200
FD_STEP = 1e-5
# weak prior sd on thresholds, switched on only when an extreme category is empty
TAU_PRIOR_SD = 5.0


@dataclass(frozen=True)
class RaschData:
    ratings: tuple[tuple[str, str, str, int], ...]
    K: int

    def __post_init__(self):
        if self.K < 2:
            raise InputError("K must be >= 2")
        if not self.ratings:
            raise InputError("no ratings")
        ratings = tuple((str(a), str(b), str(c), int(y)) for a, b, c, y in self.ratings)
        for i, (_, _, _, y) in enumerate(ratings):
            if not 1 <= y <= self.K:
                raise InputError(f"rating {i}: {y} outside 1..{self.K}")
        object.__setattr__(self, "ratings", ratings)

    @property
    def raters(self) -> tuple[str, ...]:
        return tuple(sorted({r[0] for r in self.ratings}))

    @property
    def metrics(self) -> tuple[str, ...]:
        names = {r[2] for r in self.ratings}
        return tuple(sorted(names, key=lambda m: (METRICS.index(m) if m in METRICS else len(METRICS), m)))

    @property
    def cells(self) -> tuple[tuple[str, str], ...]:
        return tuple(sorted({(r[1], r[2]) for r in self.ratings}))


@dataclass(frozen=True)
class RaschFit:
    tau: np.ndarray
    beta_m: dict[str, float]
    u: dict[str, float]
    v: dict[tuple[str, str], float]
    laplace_se: dict[str, float]
    logpost: float
    converged: bool
    iterations: int
    sigma_u: float
    sigma_v: float
    warnings: tuple[str, ...] = field(default=())

    def eta(self, rater: str, hypothesis: str, metric: str) -> float:
        return self.beta_m[metric] + self.u[rater] + self.v.get((hypothesis, metric), 0.0)

    def category_probabilities(self, rater: str, hypothesis: str, metric: str) -> np.ndarray:
        return category_probabilities(self.tau, self.eta(rater, hypothesis, metric))


def category_probabilities(tau: Sequence[float], eta: float) -> np.ndarray:
    """P(Y = k) for k = 1..K; sums to one by construction."""
    cdf = np.concatenate(([0.0], ndtr(np.asarray(tau, dtype=float) - eta), [1.0]))
    return np.diff(cdf)


class RaschModel:
    """Log-posterior and analytic gradient over the packed parameter vector."""

    def __init__(self, data: RaschData, sigma_u: float = 1.0, sigma_v: float = 1.0, tau_prior_sd: float | None = None):
        if sigma_u <= 0:
            raise InputError("sigma_u must be positive")
        if sigma_v < 0:
            raise InputError("sigma_v must be >= 0")
        self.data = data
        self.K = data.K
        self.sigma_u = sigma_u
        self.sigma_v = sigma_v
        self.tau_prior_sd = tau_prior_sd
        self.raters = data.raters
        self.metrics = data.metrics
        self.cells = data.cells if sigma_v > 0 else ()
        ri = {r: i for i, r in enumerate(self.raters)}
        mi = {m: i for i, m in enumerate(self.metrics)}
        ci = {c: i for i, c in enumerate(self.cells)}
        self.rater_idx = np.array([ri[r[0]] for r in data.ratings], dtype=np.int64)
        self.metric_idx = np.array([mi[r[2]] for r in data.ratings], dtype=np.int64)
        self.cell_idx = np.array([ci.get((r[1], r[2]), -1) for r in data.ratings], dtype=np.int64)
        self.y = np.array([r[3] for r in data.ratings], dtype=np.int64)
        self.n_tau = self.K - 1
        self.n_beta = len(self.metrics) - 1
        self.n_u = len(self.raters)
        self.n_v = len(self.cells)
        self.size = self.n_tau + self.n_beta + self.n_u + self.n_v

    # layout: [tau_1, log-increments, beta (non-reference metrics), u, v]
    def split(self, theta: np.ndarray):
        k = self.n_tau
        a = theta[:k]
        beta = np.concatenate(([0.0], theta[k : k + self.n_beta]))
        k += self.n_beta
        u = theta[k : k + self.n_u]
        k += self.n_u
        v = theta[k : k + self.n_v]
        return a, beta, u, v

    def tau(self, theta: np.ndarray) -> np.ndarray:
        a = theta[: self.n_tau]
        return a[0] + np.concatenate(([0.0], np.cumsum(np.exp(a[1:]))))

    def names(self) -> list[str]:
        out = ["tau_1"] + [f"log_gap_{k}" for k in range(2, self.K)]
        out += [f"beta[{m}]" for m in self.metrics[1:]]
        out += [f"u[{r}]" for r in self.raters]
        out += [f"v[{h}|{m}]" for h, m in self.cells]
        return out

    def _eta(self, beta, u, v):
        eta = beta[self.metric_idx] + u[self.rater_idx]
        if self.n_v:
            eta = eta + v[self.cell_idx]
        return eta

    def logpost(self, theta: np.ndarray) -> float:
        return self.value_and_grad(theta)[0]

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.value_and_grad(theta)[1]

    def value_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        a, beta, u, v = self.split(theta)
        tau = self.tau(theta)
        eta = self._eta(beta, u, v)
        ll, gtau, geta = _kernels.probit_loglik(tau, eta, self.y)
        val = ll - 0.5 * float(u @ u) / self.sigma_u**2
        gu = np.bincount(self.rater_idx, weights=geta, minlength=self.n_u) - u / self.sigma_u**2
        if self.n_v:
            val -= 0.5 * float(v @ v) / self.sigma_v**2
            gv = np.bincount(self.cell_idx, weights=geta, minlength=self.n_v) - v / self.sigma_v**2
        else:
            gv = np.zeros(0)
        if self.tau_prior_sd:
            val -= 0.5 * float(tau @ tau) / self.tau_prior_sd**2
            gtau = gtau - tau / self.tau_prior_sd**2
        gbeta = np.bincount(self.metric_idx, weights=geta, minlength=len(self.metrics))[1:]
        # chain rule through tau_k = a_0 + sum_{l<k} exp(a_l)
        ga = np.empty(self.n_tau)
        ga[0] = gtau.sum()
        tail = np.cumsum(gtau[::-1])[::-1]
        ga[1:] = np.exp(a[1:]) * tail[1:]
        return float(val), np.concatenate((ga, gbeta, gu, gv))

    def fd_hessian(self, theta: np.ndarray, h: float = FD_STEP) -> np.ndarray:
        P = self.size
        H = np.empty((P, P))
        for j in range(P):
            e = np.zeros(P)
            e[j] = h
            H[:, j] = (self.grad(theta + e) - self.grad(theta - e)) / (2 * h)
        return 0.5 * (H + H.T)

    def start(self) -> np.ndarray:
        counts = np.bincount(self.y, minlength=self.K + 1)[1:].astype(float)
        cum = (np.cumsum(counts)[:-1] + 0.5) / (counts.sum() + 1.0)
        tau0 = ndtri(cum)
        gaps = np.maximum(np.diff(tau0), 1e-2)
        theta = np.zeros(self.size)
        theta[0] = tau0[0]
        theta[1 : self.n_tau] = np.log(gaps)
        return theta


def _newton_fd(model: RaschModel, theta0: np.ndarray):
    theta = theta0.copy()
    val, g = model.value_and_grad(theta)
    for it in range(1, MAX_ITER + 1):
        if np.linalg.norm(g) <= GRAD_TOL:
            return theta, val, True, it - 1
        H = model.fd_hessian(theta)
        if not np.all(np.isfinite(H)):
            raise FitError("non-finite Hessian")
        w, Q = np.linalg.eigh(-H)
        w = np.maximum(w, 1e-8 * max(1.0, w.max()))
        step = Q @ ((Q.T @ g) / w)
        t = 1.0
        while True:
            cand = theta + t * step
            cval, cg = model.value_and_grad(cand)
            if np.isfinite(cval) and cval >= val - 1e-12 * abs(val):
                break
            t *= 0.5
            if t < 1e-12:
                return theta, val, False, it
        theta, val, g = cand, cval, cg
    return theta, val, bool(np.linalg.norm(g) <= GRAD_TOL), MAX_ITER


def fit_rasch_map(data: RaschData, sigma_u: float = 1.0, sigma_v: float = 1.0) -> RaschFit:
    """Maximize the log-posterior; ``sigma_v=0`` fixes the hypothesis-on-metric effects at zero."""
    counts = np.bincount([r[3] for r in data.ratings], minlength=data.K + 1)[1:]
    notes = []
    tau_prior = None
    if counts[0] == 0 or counts[-1] == 0:
        used = int(np.count_nonzero(counts))
        msg = (f"threshold divergence: extreme categories empty ({used} of {data.K} categories used); "
               f"thresholds held by a N(0, {TAU_PRIOR_SD}^2) prior")
        log.warning(msg)
        notes.append(msg)
        tau_prior = TAU_PRIOR_SD
    model = RaschModel(data, sigma_u, sigma_v, tau_prior)
    theta, val, converged, iters = _newton_fd(model, model.start())
    if not converged:
        log.warning("Rasch fit stopped before the gradient tolerance was met")
    H = model.fd_hessian(theta)
    if not np.all(np.isfinite(H)):
        raise FitError("non-finite Hessian")
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        raise FitError("singular Hessian at the mode") from None
    a, beta, u, v = model.split(theta)
    tau = model.tau(theta)
    # delta method for tau
    J = np.zeros((model.n_tau, model.size))
    J[:, 0] = 1.0
    for k in range(1, model.n_tau):
        J[k, 1 : k + 1] = np.exp(a[1 : k + 1])
    tau_cov = J @ cov @ J.T
    se = {}
    for k in range(model.n_tau):
        se[f"tau[{k + 1}]"] = float(math.sqrt(max(tau_cov[k, k], 0.0)))
    names = model.names()
    for i, name in enumerate(names):
        if not name.startswith(("tau_", "log_gap")):
            se[name] = float(math.sqrt(max(cov[i, i], 0.0)))
    return RaschFit(
        tau=tau,
        beta_m=dict(zip(model.metrics, map(float, beta))),
        u=dict(zip(model.raters, map(float, u))),
        v=dict(zip(model.cells, map(float, v))),
        laplace_se=se,
        logpost=val,
        converged=converged,
        iterations=iters,
        sigma_u=sigma_u,
        sigma_v=sigma_v,
        warnings=tuple(notes),
    )


def laplace_log_evidence(data: RaschData, sigma_u: float, sigma_v: float) -> float:
    """Laplace approximation to the log marginal likelihood (flat priors on tau and beta)."""
    fit = fit_rasch_map(data, sigma_u, sigma_v)
    model = RaschModel(data, sigma_u, sigma_v)
    theta = np.concatenate((
        [fit.tau[0]], np.log(np.diff(fit.tau)),
        [fit.beta_m[m] for m in model.metrics[1:]],
        [fit.u[r] for r in model.raters],
        [fit.v[c] for c in model.cells],
    ))
    H = model.fd_hessian(theta)
    sign, logdet = np.linalg.slogdet(-H)
    if sign <= 0:
        raise FitError("Hessian is not negative definite at the mode")
    norm = -0.5 * model.n_u * math.log(2 * math.pi * sigma_u**2)
    if model.n_v:
        norm -= 0.5 * model.n_v * math.log(2 * math.pi * sigma_v**2)
    return model.logpost(theta) + norm + 0.5 * model.size * math.log(2 * math.pi) - 0.5 * logdet


def select_prior_sds(
    data: RaschData, grid: Iterable[float] = (0.25, 0.5, 1.0, 2.0)
) -> tuple[float, float]:
    """Empirical-Bayes choice of (sigma_u, sigma_v) over a grid by Laplace evidence."""
    grid = list(grid)
    best = max(itertools.product(grid, grid), key=lambda s: laplace_log_evidence(data, *s))
    return best


RATING_COLUMNS = ("rater", "hypothesis", "metric", "rating")


def read_ratings(source: str | Path | io.TextIOBase, K: int | None = None) -> RaschData:
    fh = open(source, newline="", encoding="utf-8") if isinstance(source, (str, Path)) else source
    try:
        reader = csv.DictReader(fh)
        missing = [c for c in RATING_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise InputError(f"row 1: missing columns {missing}")
        rows = []
        for rowno, row in enumerate(reader, start=2):
            try:
                rating = int(row["rating"])
            except (TypeError, ValueError):
                raise InputError(f"row {rowno}: rating {row['rating']!r} is not an integer") from None
            if rating < 1 or (K is not None and rating > K):
                raise InputError(f"row {rowno}: rating {rating} outside 1..{K or 'K'}")
            if not all((row[c] or "").strip() for c in RATING_COLUMNS[:3]):
                raise InputError(f"row {rowno}: empty identifier")
            rows.append((row["rater"].strip(), row["hypothesis"].strip(), row["metric"].strip(), rating))
    finally:
        if fh is not source:
            fh.close()
    if not rows:
        raise InputError("no ratings")
    return RaschData(tuple(rows), K if K is not None else max(r[3] for r in rows))


def fit_rows(fit: RaschFit) -> list[tuple[str, float, float]]:
    """(parameter, estimate, se) rows in a stable order."""
    rows = [(f"tau[{k + 1}]", float(t), fit.laplace_se[f"tau[{k + 1}]"]) for k, t in enumerate(fit.tau)]
    for m, b in fit.beta_m.items():
        rows.append((f"beta[{m}]", b, fit.laplace_se.get(f"beta[{m}]", 0.0)))
    for r, val in fit.u.items():
        rows.append((f"u[{r}]", val, fit.laplace_se[f"u[{r}]"]))
    for (h, m), val in fit.v.items():
        rows.append((f"v[{h}|{m}]", val, fit.laplace_se[f"v[{h}|{m}]"]))
    return rows
