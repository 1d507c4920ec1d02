"""Quasi-variances: per-system variances whose pairwise sums approximate contrast variances."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize, nnls

from ..errors import InputError

Z95 = 1.96


@dataclass(frozen=True)
class QuasiVariances:
    systems: tuple[str, ...]
    q: dict[str, float]
    relative_errors: dict[tuple[str, str], float]
    scale: str = "variance"
    note: str | None = None


def contrast_variances(vcov: np.ndarray) -> np.ndarray:
    d = np.diag(vcov)
    return d[:, None] + d[None, :] - 2.0 * vcov


def quasi_variances(
    vcov: np.ndarray | object,
    systems: Sequence[str] | None = None,
    *,
    scale: str = "variance",
) -> QuasiVariances:
    """Fit q >= 0 so that q_i + q_j matches var(b_i - b_j) for every pair.

    ``vcov`` is an ability covariance matrix or a fit exposing ``beta_vcov``
    and ``systems``. ``scale="variance"`` solves nonnegative least squares
    on the variances; ``scale="log"`` matches log(q_i + q_j) to the log
    contrast variance.
    """
    if hasattr(vcov, "beta_vcov"):
        systems = vcov.systems if systems is None else systems
        vcov = vcov.beta_vcov
    S = np.asarray(vcov, dtype=float)
    n = S.shape[0]
    if S.shape != (n, n):
        raise InputError("vcov must be square")
    if systems is None:
        systems = [f"S{i + 1}" for i in range(n)]
    systems = tuple(systems)
    if len(systems) != n:
        raise InputError("systems and vcov sizes differ")
    if n < 2:
        raise InputError("need at least two systems")
    V = contrast_variances(S)
    pairs = list(itertools.combinations(range(n), 2))
    if np.any([V[i, j] <= 0 for i, j in pairs]):
        raise InputError("contrast variances must be positive")
    note = None
    if n == 2:
        q = np.full(2, V[0, 1] / 2.0)
        note = "two systems: the single contrast variance is split equally (underdetermined)"
    else:
        A = np.zeros((len(pairs), n))
        b = np.empty(len(pairs))
        for r, (i, j) in enumerate(pairs):
            A[r, i] = A[r, j] = 1.0
            b[r] = V[i, j]
        q, _ = nnls(A, b)
        if n == 3:
            note = "three systems: the fit is exact when the solution is interior"
        if scale == "log":
            q = _log_scale(A, b, q)
        elif scale != "variance":
            raise InputError(f"unknown scale {scale!r}")
    rel = {(systems[i], systems[j]): float((q[i] + q[j]) / V[i, j] - 1.0) for i, j in pairs}
    return QuasiVariances(systems, {s: float(v) for s, v in zip(systems, q)}, rel, scale, note)


def _log_scale(A: np.ndarray, b: np.ndarray, start: np.ndarray) -> np.ndarray:
    logb = np.log(b)
    floor = 1e-12 * float(b.max())
    z0 = np.log(np.maximum(start, floor))

    def f(z):
        q = np.exp(z)
        s = A @ q
        r = np.log(s) - logb
        grad = (A.T @ (2.0 * r / s)) * q
        return float(r @ r), grad

    res = minimize(f, z0, jac=True, method="BFGS", options={"gtol": 1e-12, "maxiter": 1000})
    return np.exp(res.x)


def comparison_interval(fit, qv: QuasiVariances, system: str, z: float = Z95) -> tuple[float, float]:
    """beta +/- z * sqrt(q) for one system."""
    beta = fit.beta[system] if hasattr(fit, "beta") else fit[system]
    half = z * math.sqrt(qv.q[system])
    return beta - half, beta + half


def write_fit_csv(fit, qv: QuasiVariances, dest: str | Path | io.TextIOBase) -> list[dict]:
    """Write (system, beta, quasi_variance, lo95, hi95) rows; returns them too."""
    rows = []
    for s in qv.systems:
        lo, hi = comparison_interval(fit, qv, s)
        rows.append({"system": s, "beta": fit.beta[s], "quasi_variance": qv.q[s], "lo95": lo, "hi95": hi})
    fh = open(dest, "w", newline="", encoding="utf-8") if isinstance(dest, (str, Path)) else dest
    try:
        writer = csv.DictWriter(fh, fieldnames=["system", "beta", "quasi_variance", "lo95", "hi95"],
                                lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
    finally:
        if fh is not dest:
            fh.close()
    return rows

