"""Shared oracles and cached heavy computations for the test suite.

Everything here is deliberately independent of the implementation under test:
finite differences use a raw binomial stencil with Richardson extrapolation,
transport problems are solved by enumerating basic feasible solutions of the
transportation polytope, and expensive search results (rbar) are memoized so
unit tests and acceptance tests share one computation.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction
from functools import lru_cache

import numpy as np

from moe_rates.algebra import rbar

# ---------------------------------------------------------------------------
# Cached heavy searches
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def cached_rbar(s: int, n_starts: int = 120, seed: int = 0):
    return rbar(s, n_starts=n_starts, seed=seed)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def _stencil(func, point, order, h):
    """Central binomial-stencil mixed partial of `func` at `point`."""
    order = tuple(order)
    total = 0.0
    for combo in itertools.product(*(range(o + 1) for o in order)):
        coeff = 1.0
        for o, j in zip(order, combo):
            coeff *= (-1) ** j * math.comb(o, j)
        shifted = np.array(point, dtype=float)
        for idx, (o, j) in enumerate(zip(order, combo)):
            shifted[idx] += h * (o / 2.0 - j)
        total += coeff * func(shifted)
    return total / h ** sum(order)


def fd_partial(func, point, order, h=0.05):
    """Richardson-extrapolated central finite difference (O(h^4) accurate)."""
    coarse = _stencil(func, point, order, h)
    fine = _stencil(func, point, order, h / 2.0)
    return (4.0 * fine - coarse) / 3.0


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


# ---------------------------------------------------------------------------
# Brute-force transportation oracle (vertex enumeration)
# ---------------------------------------------------------------------------


def _is_spanning_tree(cells, m, n):
    """cells is a spanning tree of the bipartite row/column graph."""
    if len(cells) != m + n - 1:
        return False
    parent = list(range(m + n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in cells:
        ri, rj = find(i), find(m + j)
        if ri == rj:
            return False  # cycle
        parent[ri] = rj
    root = find(0)
    return all(find(v) == root for v in range(m + n))


@lru_cache(maxsize=None)
def _bases_for_shape(m, n):
    """All tree bases for an m x n problem, with precomputed solve inverses.

    For a basis B the flows solve the marginal equations; dropping the final
    (redundant) column equation leaves a square nonsingular system.
    """
    cells = list(itertools.product(range(m), range(n)))
    bases = [b for b in itertools.combinations(cells, m + n - 1) if _is_spanning_tree(b, m, n)]
    mats = []
    for basis in bases:
        A = np.zeros((m + n - 1, m + n - 1))
        for col, (i, j) in enumerate(basis):
            A[i, col] = 1.0
            if j < n - 1:
                A[m + j, col] = 1.0
        mats.append(np.linalg.inv(A))
    rows = np.array([[c[0] for c in basis] for basis in bases])
    cols = np.array([[c[1] for c in basis] for basis in bases])
    return np.stack(mats), rows, cols


def transport_bruteforce(cost, a, b):
    """Exact optimum by enumerating all basic feasible solutions."""
    cost = np.asarray(cost, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = cost.shape
    if m == 1:
        return float(np.dot(b, cost[0]))
    if n == 1:
        return float(np.dot(a, cost[:, 0]))
    inv, rows, cols = _bases_for_shape(m, n)
    rhs = np.concatenate([a, b[:-1]])
    flows = np.einsum("bij,j->bi", inv, rhs)
    feasible = np.all(flows >= -1e-12, axis=1)
    if not np.any(feasible):
        raise RuntimeError("no feasible basis (marginals inconsistent)")
    objs = np.sum(flows * cost[rows, cols], axis=1)
    return float(np.min(objs[feasible]))


# ---------------------------------------------------------------------------
# Exact-arithmetic re-summation oracles for the polynomial systems
# ---------------------------------------------------------------------------


def poly_system_exact(r, a, b, c):
    """Fraction re-summation of the order-r polynomial system residuals."""
    a = [Fraction(v) for v in a]
    b = [Fraction(v) for v in b]
    c = [Fraction(v) for v in c]
    out = []
    for alpha in range(1, r + 1):
        total = Fraction(0)
        for n2 in range(alpha // 2 + 1):
            n1 = alpha - 2 * n2
            if n1 + n2 < 1:
                continue
            for aj, bj, cj in zip(a, b, c):
                total += cj * cj * aj**n1 * bj**n2 / (
                    math.factorial(n1) * math.factorial(n2)
                )
        out.append(total)
    return out


def limit_system_exact(theta, r, a, b, c, table):
    """Fraction re-summation of the 2r limit-system ratios.

    `table` entries are integer-valued floats, so exact conversion is safe.
    """
    theta = Fraction(theta)
    a = [Fraction(v) for v in a]
    b = [Fraction(v) for v in b]
    c = [Fraction(v) for v in c]
    denom = sum(
        cj * (abs(aj) ** r + abs(bj) ** math.ceil(r / 2)) for aj, bj, cj in zip(a, b, c)
    )
    out = []
    for l in range(1, 2 * r + 1):
        total = Fraction(0)
        for gamma1 in range(0, r + 1):
            base = (gamma1 + 1) // 2
            for gamma2 in range(0, r + 1 - gamma1):
                if gamma1 + gamma2 < 1:
                    continue
                for u in range(gamma1 // 2 + 1):
                    if base + u + 2 * gamma2 != l:
                        continue
                    p_val = sum(
                        Fraction(coeff) * theta**e
                        for e, coeff in table.poly(gamma1, u).items()
                    )
                    coeff = p_val / (
                        Fraction(2) ** gamma2
                        * math.factorial(gamma1)
                        * math.factorial(gamma2)
                    )
                    total += coeff * sum(
                        cj * aj**gamma1 * bj**gamma2 for aj, bj, cj in zip(a, b, c)
                    )
        out.append(total / denom)
    return out


# ---------------------------------------------------------------------------
# Random instance generators
# ---------------------------------------------------------------------------


def random_measure(rng, pair, k, weight_floor=0.05):
    """Random mixing measure strictly inside the pair's domain boxes."""
    from moe_rates.model import MixingMeasure

    theta1 = np.column_stack(
        [rng.uniform(lo + 0.1, hi - 0.1, k) for lo, hi in pair.theta1_box]
    )
    theta2 = np.column_stack(
        [rng.uniform(max(lo, 0.1), min(hi, 2.0), k) for lo, hi in pair.theta2_box]
    )
    w = rng.uniform(weight_floor, 1.0, k)
    return MixingMeasure(theta1, theta2, w / w.sum())
