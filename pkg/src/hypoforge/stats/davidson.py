"""Davidson's extension of Bradley-Terry with an explicit tie parameter."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import FitError, InputError
from . import _kernels
from .bradley_terry import (
    ComparisonRecord,
    check_connected,
    encode,
    identification_matrix,
    newton,
)

log = logging.getLogger(__name__)

# weak prior sd on log(nu), used only when every outcome is a tie
ALL_TIE_PRIOR_SD = 10.0


@dataclass(frozen=True)
class DavidsonFit:
    systems: tuple[str, ...]
    beta: dict[str, float]
    alpha: float | None
    nu: float
    vcov: np.ndarray
    names: tuple[str, ...]
    loglik: float
    converged: bool
    iterations: int
    warnings: tuple[str, ...] = field(default=())

    @property
    def beta_vcov(self) -> np.ndarray:
        k = 1 if self.alpha is not None else 0
        n = len(self.systems)
        return self.vcov[k : k + n, k : k + n]

    def probabilities(self, first: str, second: str) -> tuple[float, float, float]:
        """(first wins, second wins, tie)."""
        x = 0.5 * ((self.alpha or 0.0) + self.beta[first] - self.beta[second])
        z = math.exp(x) + math.exp(-x) + self.nu
        return math.exp(x) / z, math.exp(-x) / z, self.nu / z


def fit_davidson(
    records: Sequence[ComparisonRecord],
    include_order_effect: bool = True,
    *,
    identification: str = "sum",
) -> DavidsonFit:
    """Maximum likelihood for P(tie) proportional to nu * sqrt(p_first * p_second).

    Without ties nu is fixed at 0, a warning is logged, and the abilities
    coincide with the plain Bradley-Terry fit.
    """
    systems, first, second, code = encode(records)
    n = len(systems)
    if n < 2:
        raise InputError("need at least two systems")
    check_connected(systems, first, second)
    w = np.ones(len(code))
    notes = []
    has_ties = bool(np.any(code == 0))
    all_ties = bool(np.all(code == 0))
    if not has_ties:
        msg = "no ties observed; nu -> 0 and the tie parameter is dropped"
        log.warning(msg)
        notes.append(msg)
    if all_ties:
        msg = f"all outcomes are ties; log(nu) diverges and is held by a N(0, {ALL_TIE_PRIOR_SD}^2) prior"
        log.warning(msg)
        notes.append(msg)

    T = identification_matrix(n, identification)
    k = 1 if include_order_effect else 0
    L = 1 if has_ties else 0
    # reduced parameters: [alpha?] + free abilities + [log nu?]
    M = np.zeros((n + 2, k + n - 1 + L))
    if include_order_effect:
        M[0, 0] = 1.0
    M[1 : n + 1, k : k + n - 1] = T
    if has_ties:
        M[n + 1, -1] = 1.0

    def objective(z):
        full = M @ z
        lam = full[n + 1] if has_ties else -np.inf
        ll, g, H = _kernels.davidson_loglik(first, second, code, w, full[0], full[1 : n + 1], lam,
                                            include_order_effect)
        if all_ties:
            ll -= 0.5 * lam**2 / ALL_TIE_PRIOR_SD**2
            g = g.copy()
            H = H.copy()
            g[n + 1] -= lam / ALL_TIE_PRIOR_SD**2
            H[n + 1, n + 1] -= 1.0 / ALL_TIE_PRIOR_SD**2
        return ll, M.T @ g, M.T @ H @ M

    z, ll, g, H, converged, iters = newton(objective, np.zeros(M.shape[1]))
    if not converged:
        log.warning("Davidson fit did not converge (gradient norm %.3g)", np.linalg.norm(g))
    try:
        cov_red = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        raise FitError("observed information is singular") from None
    full = M @ z
    cov = M @ cov_red @ M.T
    keep = ([0] if include_order_effect else []) + list(range(1, n + 1)) + ([n + 1] if has_ties else [])
    cov = cov[np.ix_(keep, keep)]
    names = (("alpha",) if include_order_effect else ()) + systems + (("log_nu",) if has_ties else ())
    return DavidsonFit(
        systems=systems,
        beta={s: float(b) for s, b in zip(systems, full[1 : n + 1])},
        alpha=float(full[0]) if include_order_effect else None,
        nu=float(np.exp(full[n + 1])) if has_ties else 0.0,
        vcov=0.5 * (cov + cov.T),
        names=names,
        loglik=float(ll),
        converged=converged,
        iterations=iters,
        warnings=tuple(notes),
    )
