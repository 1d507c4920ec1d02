"""Slow, independent reference solutions used to check the fast implementations.

Nothing here calls into hypoforge's numerical code. The paired-comparison
oracles search a grid that shrinks around the best point; the quasi-variance
oracle runs cyclic coordinate descent; the ordered-probit oracle climbs a
finite-difference gradient; the subgraph oracle enumerates every simple path.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict

import numpy as np

_CODE = {"FirstWins": 1, "SecondWins": -1, "Tie": 0}


def pair_counts(records):
    """{(first, second): [first wins, second wins, ties]} keyed by presentation order."""
    out = defaultdict(lambda: [0, 0, 0])
    for r in records:
        code = _CODE[r.outcome.value]
        out[(r.first, r.second)][{1: 0, -1: 1, 0: 2}[code]] += 1
    return dict(out)


def _grid_search(f, center, width, steps=11, tol=1e-6, shrink=0.5):
    """Maximize ``f`` (vectorized over the last axis of a (..., d) array) on shrinking grids."""
    center = np.asarray(center, dtype=float)
    d = center.size
    offsets = np.linspace(-1.0, 1.0, steps)
    while width > tol:
        axes = [c + width * offsets for c in center]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        vals = f(pts)
        center = pts[int(np.argmax(vals))]
        # keep the optimum inside the next grid: shrink slowly relative to the spacing
        width *= shrink
    return center


def _ability_columns(pts, systems, with_alpha):
    """Reference parameterization: first system fixed at 0."""
    k = 1 if with_alpha else 0
    alpha = pts[:, 0] if with_alpha else np.zeros(len(pts))
    betas = {systems[0]: np.zeros(len(pts))}
    for i, s in enumerate(systems[1:]):
        betas[s] = pts[:, k + i]
    return alpha, betas


def bt_grid_oracle(records, include_order_effect=True, width=4.0):
    """Ties-as-half-wins Bradley-Terry MLE by grid refinement; abilities centred to sum zero."""
    counts = pair_counts(records)
    systems = sorted({s for pair in counts for s in pair})
    d = (1 if include_order_effect else 0) + len(systems) - 1

    def loglik(pts):
        alpha, betas = _ability_columns(pts, systems, include_order_effect)
        total = np.zeros(len(pts))
        for (a, b), (wa, wb, t) in counts.items():
            eta = alpha + betas[a] - betas[b]
            s = wa + 0.5 * t
            n = wa + wb + t
            total += s * eta - n * np.logaddexp(0.0, eta)
        return total

    best = _grid_search(loglik, np.zeros(d), width)
    alpha, betas = _ability_columns(best[None, :], systems, include_order_effect)
    b = np.array([betas[s][0] for s in systems])
    b -= b.mean()
    return dict(zip(systems, b)), (float(alpha[0]) if include_order_effect else None)


def davidson_grid_oracle(records, include_order_effect=True, width=4.0):
    """Davidson MLE by grid refinement over (alpha, abilities, log nu)."""
    counts = pair_counts(records)
    systems = sorted({s for pair in counts for s in pair})
    d = (1 if include_order_effect else 0) + len(systems) - 1 + 1

    def loglik(pts):
        alpha, betas = _ability_columns(pts, systems, include_order_effect)
        lam = pts[:, -1]
        total = np.zeros(len(pts))
        for (a, b), (wa, wb, t) in counts.items():
            x = 0.5 * (alpha + betas[a] - betas[b])
            log_z = np.logaddexp(np.logaddexp(x, -x), lam)
            total += wa * (x - log_z) + wb * (-x - log_z) + t * (lam - log_z)
        return total

    best = _grid_search(loglik, np.zeros(d), width)
    alpha, betas = _ability_columns(best[None, :], systems, include_order_effect)
    b = np.array([betas[s][0] for s in systems])
    b -= b.mean()
    return dict(zip(systems, b)), (float(alpha[0]) if include_order_effect else None), math.exp(best[-1])


def quasi_variance_cd(vcov, tol=1e-14, max_sweeps=200000):
    """min sum_{i<j} (q_i + q_j - V_ij)^2 over q >= 0 by exact cyclic coordinate minimization."""
    S = np.asarray(vcov, dtype=float)
    n = S.shape[0]
    V = [[S[i, i] + S[j, j] - 2 * S[i, j] for j in range(n)] for i in range(n)]
    q = [S[i, i] for i in range(n)]
    for _ in range(max_sweeps):
        delta = 0.0
        for i in range(n):
            new = max(0.0, sum(V[i][j] - q[j] for j in range(n) if j != i) / (n - 1))
            delta = max(delta, abs(new - q[i]))
            q[i] = new
        if delta < tol:
            break
    return np.array(q)


def _phi(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def ordered_probit_oracle(y, groups, K, step=0.05, tol=1e-10, max_iter=200000):
    """Ordered-probit MLE with one shift per group (group 0 is the reference).

    P(Y <= k | g) = Phi(tau_k - shift_g). Plain gradient ascent with central
    finite differences and step halving on the log-likelihood.
    """
    G = max(groups) + 1
    counts = [[0] * (K + 1) for _ in range(G)]
    for yi, gi in zip(y, groups):
        counts[gi][yi] += 1

    def loglik(p):
        tau = p[: K - 1]
        if any(b <= a for a, b in zip(tau, tau[1:])):
            return -math.inf
        shifts = [0.0] + list(p[K - 1 :])
        total = 0.0
        for g in range(G):
            for k in range(1, K + 1):
                c = counts[g][k]
                if not c:
                    continue
                hi = _phi(tau[k - 1] - shifts[g]) if k < K else 1.0
                lo = _phi(tau[k - 2] - shifts[g]) if k > 1 else 0.0
                if hi - lo <= 0:
                    return -math.inf
                total += c * math.log(hi - lo)
        return total

    p = [(-1.0 + 2.0 * k / (K - 2)) if K > 2 else 0.0 for k in range(K - 1)] + [0.0] * (G - 1)
    val = loglik(p)
    h = 1e-6
    for _ in range(max_iter):
        g = []
        for j in range(len(p)):
            up = p.copy()
            dn = p.copy()
            up[j] += h
            dn[j] -= h
            g.append((loglik(up) - loglik(dn)) / (2 * h))
        if math.sqrt(sum(x * x for x in g)) < tol:
            break
        t = step
        while t > 1e-14:
            cand = [a + t * b for a, b in zip(p, g)]
            cval = loglik(cand)
            if cval > val:
                p, val = cand, cval
                break
            t *= 0.5
        else:
            break
    return np.array(p[: K - 1]), np.array([0.0] + p[K - 1 :])


def brute_force_subgraph(nodes, edges, seeds, depth, relations=None):
    """(direct edge set, multi-hop path set) by exhaustive enumeration.

    ``edges`` are (src, relation, dst) triples; traversal ignores direction.
    Direct edges: both endpoints within one hop of some seed. Paths: simple
    paths of 2..depth edges between two distinct seeds, listed from the
    smaller seed id.
    """
    ok = [e for e in set(edges) if relations is None or e[1] in relations]
    seeds = sorted(set(seeds))
    hood = set(seeds)
    for s, _, d in ok:
        if s in seeds:
            hood.add(d)
        if d in seeds:
            hood.add(s)
    direct = {e for e in ok if e[0] in hood and e[2] in hood}
    paths = set()
    for length in range(2, depth + 1):
        for combo in itertools.product(ok, repeat=length):
            for start in seeds:
                walk = [start]
                good = True
                for s, _, d in combo:
                    here = walk[-1]
                    if s == here:
                        nxt = d
                    elif d == here:
                        nxt = s
                    else:
                        good = False
                        break
                    if nxt in walk:
                        good = False
                        break
                    walk.append(nxt)
                if good and walk[-1] in seeds and walk[-1] > start:
                    paths.add((tuple(walk), tuple(combo)))
    return direct, paths


def random_graph(seed, max_nodes=12):
    """Seeded small multigraph: (node ids, (src, relation, dst) triples, seeds)."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, max_nodes + 1))
    nodes = [f"N{i:02d}" for i in range(n)]
    m = int(rng.integers(n - 1, 2 * n + 1))
    edges = set()
    for _ in range(m):
        a, b = rng.choice(n, size=2, replace=False)
        edges.add((nodes[a], str(rng.choice(["binds", "regulates", "expressed_in"])), nodes[b]))
    k = int(rng.integers(1, min(4, n) + 1))
    seeds = sorted(nodes[i] for i in rng.choice(n, size=k, replace=False))
    return nodes, sorted(edges), seeds
