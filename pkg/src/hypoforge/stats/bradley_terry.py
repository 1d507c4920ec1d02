"""Bradley-Terry model with an order effect; ties count as half a win to each side."""

from __future__ import annotations

import csv
import enum
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..core import METRICS
from ..errors import FitError, IdentifiabilityError, InputError
from . import _kernels

log = logging.getLogger(__name__)

MAX_ITER = 100
GRAD_TOL = 1e-8
SEPARATION_RIDGE = 1e-2


class Outcome(str, enum.Enum):
    FIRST_WINS = "FirstWins"
    SECOND_WINS = "SecondWins"
    TIE = "Tie"


_OUTCOME_ALIASES = {
    "firstwins": Outcome.FIRST_WINS, "first": Outcome.FIRST_WINS, "a": Outcome.FIRST_WINS, "1": Outcome.FIRST_WINS,
    "secondwins": Outcome.SECOND_WINS, "second": Outcome.SECOND_WINS, "b": Outcome.SECOND_WINS,
    "-1": Outcome.SECOND_WINS,
    "tie": Outcome.TIE, "0": Outcome.TIE,
}


def parse_outcome(text: str) -> Outcome:
    try:
        return _OUTCOME_ALIASES[str(text).strip().lower()]
    except KeyError:
        raise InputError(f"unknown outcome {text!r}") from None


@dataclass(frozen=True)
class ComparisonRecord:
    first: str
    second: str
    metric: str = "overall"
    outcome: Outcome = Outcome.TIE
    topic: str | None = None

    def __post_init__(self):
        if self.first == self.second:
            raise InputError(f"a system cannot be compared with itself ({self.first})")
        if not isinstance(self.outcome, Outcome):
            object.__setattr__(self, "outcome", parse_outcome(self.outcome))


@dataclass(frozen=True)
class BTFit:
    """Fitted abilities. ``vcov`` is over ``names`` (alpha first when fitted, then systems)."""

    systems: tuple[str, ...]
    beta: dict[str, float]
    alpha: float | None
    vcov: np.ndarray
    names: tuple[str, ...]
    loglik: float
    converged: bool
    iterations: int
    identification: str = "sum"
    warnings: tuple[str, ...] = field(default=())

    @property
    def beta_vcov(self) -> np.ndarray:
        k = 1 if self.alpha is not None else 0
        return self.vcov[k:, k:]

    def se(self, name: str) -> float:
        i = self.names.index(name)
        return float(np.sqrt(max(self.vcov[i, i], 0.0)))

    def win_probability(self, first: str, second: str) -> float:
        eta = (self.alpha or 0.0) + self.beta[first] - self.beta[second]
        return float(1.0 / (1.0 + np.exp(-eta)))


def connected_components(systems: Sequence[str], pairs: Iterable[tuple[str, str]]) -> list[list[str]]:
    parent = {s: s for s in systems}

    def root(s):
        while parent[s] != s:
            parent[s] = parent[parent[s]]
            s = parent[s]
        return s

    for a, b in pairs:
        ra, rb = root(a), root(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[str, list[str]] = {}
    for s in systems:
        groups.setdefault(root(s), []).append(s)
    return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


def identification_matrix(n: int, identification: str = "sum") -> np.ndarray:
    """Map n-1 free coordinates to n abilities (sum-to-zero or first-system-zero)."""
    if identification == "sum":
        T = np.zeros((n, n - 1))
        T[: n - 1] = np.eye(n - 1)
        T[n - 1] = -1.0
        return T
    if identification == "reference":
        T = np.zeros((n, n - 1))
        T[1:] = np.eye(n - 1)
        return T
    raise InputError(f"unknown identification {identification!r}")


def encode(records: Sequence[ComparisonRecord], systems: Sequence[str] | None = None):
    if not records:
        raise InputError("no comparisons to fit")
    if systems is None:
        systems = sorted({r.first for r in records} | {r.second for r in records})
    index = {s: i for i, s in enumerate(systems)}
    first = np.array([index[r.first] for r in records], dtype=np.int64)
    second = np.array([index[r.second] for r in records], dtype=np.int64)
    code = np.array(
        [1 if r.outcome is Outcome.FIRST_WINS else -1 if r.outcome is Outcome.SECOND_WINS else 0 for r in records],
        dtype=np.int64,
    )
    return tuple(systems), first, second, code


def check_connected(systems, first, second) -> None:
    comps = connected_components(systems, ((systems[i], systems[j]) for i, j in zip(first, second)))
    if len(comps) > 1:
        raise IdentifiabilityError(comps)


def separated_systems(systems, first, second, code) -> list[str]:
    """Systems that never lose (or never win) counting ties as half of each."""
    wins = np.zeros(len(systems))
    losses = np.zeros(len(systems))
    np.add.at(wins, first, code >= 0)
    np.add.at(wins, second, code <= 0)
    np.add.at(losses, first, code <= 0)
    np.add.at(losses, second, code >= 0)
    return [s for s, w, l in zip(systems, wins, losses) if w == 0 or l == 0]


def newton(objective, x0: np.ndarray, max_iter: int = MAX_ITER, tol: float = GRAD_TOL):
    """Maximize a concave objective returning (value, grad, hess); step-halving on ascent failure."""
    x = np.array(x0, dtype=float)
    val, g, H = objective(x)
    for it in range(1, max_iter + 1):
        if np.linalg.norm(g) <= tol:
            return x, val, g, H, True, it - 1
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-H, g, rcond=None)[0]
        t = 1.0
        while True:
            cand = x + t * step
            cval, cg, cH = objective(cand)
            if np.isfinite(cval) and cval >= val - 1e-12 * abs(val):
                break
            t *= 0.5
            if t < 1e-10:
                return x, val, g, H, False, it
        x, val, g, H = cand, cval, cg, cH
    return x, val, g, H, bool(np.linalg.norm(g) <= tol), max_iter


def fit_bradley_terry(
    records: Sequence[ComparisonRecord],
    include_order_effect: bool = True,
    *,
    identification: str = "sum",
    systems: Sequence[str] | None = None,
) -> BTFit:
    """Maximum-likelihood abilities under logit P(first wins) = alpha + b_first - b_second.

    A tie contributes half a win to each side. Abilities are identified by
    sum-to-zero by default; ``identification="reference"`` pins the first
    system at zero instead.
    """
    systems, first, second, code = encode(records, systems)
    n = len(systems)
    if n < 2:
        raise InputError("need at least two systems")
    check_connected(systems, first, second)
    y = np.where(code == 1, 1.0, np.where(code == -1, 0.0, 0.5))
    w = np.ones_like(y)
    notes = []
    if np.all(code == 0):
        notes.append("all outcomes are ties; abilities are all zero by symmetry")
    ridge = 0.0
    sep = separated_systems(systems, first, second, code)
    if sep:
        ridge = SEPARATION_RIDGE
        msg = f"separation for {sep}; estimates diverge and are capped by a ridge penalty {ridge}"
        log.warning(msg)
        notes.append(msg)

    T = identification_matrix(n, identification)
    k = 1 if include_order_effect else 0
    # reduced parameters: [alpha?] + free ability coordinates
    M = np.zeros((n + 1, k + n - 1))
    if include_order_effect:
        M[0, 0] = 1.0
    M[1:, k:] = T

    def objective(z):
        full = M @ z
        ll, g, H = _kernels.bt_loglik(first, second, y, w, full[0], full[1:], include_order_effect)
        if ridge:
            ll -= 0.5 * ridge * float(full[1:] @ full[1:])
            g = g.copy()
            g[1:] -= ridge * full[1:]
            H = H.copy()
            H[1:, 1:] -= ridge * np.eye(n)
        return ll, M.T @ g, M.T @ H @ M

    z, ll, g, H, converged, iters = newton(objective, np.zeros(k + n - 1))
    if not converged:
        log.warning("Bradley-Terry fit did not converge (gradient norm %.3g)", np.linalg.norm(g))
    info = -H
    try:
        cov_red = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise FitError("observed information is singular") from None
    if not np.all(np.isfinite(cov_red)):
        raise FitError("non-finite covariance")
    cov_full = M @ cov_red @ M.T
    cov_full = 0.5 * (cov_full + cov_full.T)
    full = M @ z
    if not include_order_effect:
        cov_full = cov_full[1:, 1:]
    names = (("alpha",) if include_order_effect else ()) + systems
    return BTFit(
        systems=systems,
        beta={s: float(b) for s, b in zip(systems, full[1:])},
        alpha=float(full[0]) if include_order_effect else None,
        vcov=cov_full,
        names=names,
        loglik=float(ll),
        converged=converged,
        iterations=iters,
        identification=identification,
        warnings=tuple(notes),
    )


def simulate_comparisons(
    abilities: dict[str, float] | Sequence[float],
    alpha: float = 0.0,
    n: int = 1000,
    tie_rate: float = 0.0,
    seed: int = 0,
    metric: str = "overall",
    schedule: str = "balanced",
) -> list[ComparisonRecord]:
    """Simulate ``n`` comparisons.

    The balanced schedule repeats every ordered pair equally often (up to
    truncation) in shuffled order; ``schedule="random"`` draws each ordered
    pair uniformly.

    A tie occurs with probability ``tie_rate``; otherwise the first system
    wins with probability (p - tie_rate/2)/(1 - tie_rate), where p is the
    model probability. The expected half-win score therefore equals p, so
    the half-win likelihood recovers the generating parameters.
    """
    if isinstance(abilities, dict):
        names = list(abilities)
        b = np.array([abilities[s] for s in names], dtype=float)
    else:
        b = np.asarray(abilities, dtype=float)
        names = [f"S{i + 1}" for i in range(len(b))]
    m = len(names)
    if m < 2:
        raise InputError("need at least two systems")
    if not 0.0 <= tie_rate < 1.0:
        raise InputError("tie_rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    if schedule == "balanced":
        ordered = [(i, j) for i in range(m) for j in range(m) if i != j]
        reps = -(-n // len(ordered))
        pairs = np.array(ordered * reps)[:n]
        pairs = pairs[rng.permutation(n)]
    elif schedule == "random":
        pairs = np.array([rng.choice(m, size=2, replace=False) for _ in range(n)])
    else:
        raise InputError(f"unknown schedule {schedule!r}")
    out = []
    for i, j in pairs:
        p = 1.0 / (1.0 + np.exp(-(alpha + b[i] - b[j])))
        if p < tie_rate / 2 or p > 1 - tie_rate / 2:
            raise InputError("tie_rate too large for the ability spread")
        u = rng.random()
        if u < tie_rate:
            outcome = Outcome.TIE
        elif rng.random() < (p - tie_rate / 2) / (1 - tie_rate):
            outcome = Outcome.FIRST_WINS
        else:
            outcome = Outcome.SECOND_WINS
        out.append(ComparisonRecord(names[i], names[j], metric, outcome))
    return out


COMPARISON_COLUMNS = ("first", "second", "metric", "outcome")


def read_comparisons(source: str | Path | io.TextIOBase) -> list[ComparisonRecord]:
    """Read a comparisons CSV; schema problems raise InputError naming the row."""
    fh = open(source, newline="", encoding="utf-8") if isinstance(source, (str, Path)) else source
    try:
        reader = csv.DictReader(fh)
        missing = [c for c in COMPARISON_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise InputError(f"row 1: missing columns {missing}")
        out = []
        for rowno, row in enumerate(reader, start=2):
            try:
                first, second = row["first"].strip(), row["second"].strip()
                if not first or not second:
                    raise InputError("empty system id")
                metric = row["metric"].strip().lower()
                if metric not in METRICS and metric != "overall":
                    raise InputError(f"unknown metric {row['metric']!r}")
                out.append(ComparisonRecord(first, second, metric, parse_outcome(row["outcome"]),
                                            (row.get("topic") or None)))
            except (InputError, AttributeError) as exc:
                raise InputError(f"row {rowno}: {exc}") from None
        return out
    finally:
        if fh is not source:
            fh.close()


def write_comparisons(records: Iterable[ComparisonRecord], dest: str | Path | io.TextIOBase) -> None:
    fh = open(dest, "w", newline="", encoding="utf-8") if isinstance(dest, (str, Path)) else dest
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMPARISON_COLUMNS)
        for r in records:
            writer.writerow((r.first, r.second, r.metric, r.outcome.value))
    finally:
        if fh is not dest:
            fh.close()
