"""Algebraic machinery behind the convergence-rate regimes.

Four pieces live here:

* a numerical algebraic-independence check for an expert pair: linear
  independence over the covariate of the functions
  ``{dh1/dtheta1_u * dh1/dtheta1_v (u <= v), dh2sq/dtheta2_i}``;
* the order-``r`` polynomial system in ``s`` triples ``(a_j, b_j, c_j)``
  whose smallest unsolvable order ``rbar(s)`` governs the slow-rate regime;
* the table of structure polynomials ``P_u^{(gamma1)}`` describing
  derivatives of the Gaussian kernel composed with a squared mean function;
* the inhomogeneous polynomial-limit system and the bracket for its
  smallest non-vanishing order ``rtilde(theta, s)``.

Unsolvability verdicts are numerical: "no solution found below the residual
tolerance after the recorded number of multi-starts" is evidence, not proof,
and is reported as such.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares

from .errors import IndeterminateError, ValidationError
from .model import ExpertPair, h1_partials, h2sq_partials

__all__ = [
    "IndependenceVerdict",
    "independence_check",
    "poly_system_residual",
    "RbarResult",
    "rbar",
    "PPolyTable",
    "p_polynomials",
    "limit_system_residuals",
    "rtilde_bracket",
]


# ---------------------------------------------------------------------------
# Algebraic independence
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndependenceVerdict:
    independent: bool
    labels: tuple
    witness: np.ndarray | None
    witness_residual: float | None
    min_singular_ratio: float


def _basis_functions(pair: ExpertPair, theta1, theta2, xs):
    """Columns of the probe matrix with their labels."""
    cols = []
    labels = []
    for u in range(pair.q1):
        du = h1_partials(
            pair, xs, theta1, tuple(1 if j == u else 0 for j in range(pair.q1))
        )
        for v in range(u, pair.q1):
            dv = h1_partials(
                pair, xs, theta1, tuple(1 if j == v else 0 for j in range(pair.q1))
            )
            cols.append(np.broadcast_to(np.asarray(du * dv, dtype=float), xs.shape).copy())
            labels.append(("h1", u, v))
    for i in range(pair.q2):
        di = h2sq_partials(
            pair, xs, theta2, tuple(1 if j == i else 0 for j in range(pair.q2))
        )
        cols.append(np.broadcast_to(np.asarray(di, dtype=float), xs.shape).copy())
        labels.append(("h2sq", i))
    return np.column_stack(cols), tuple(labels)


def independence_check(
    pair: ExpertPair,
    theta1,
    theta2,
    n_probes: int = 60,
    tol: float = 1e-8,
    seed: int = 0,
) -> IndependenceVerdict:
    """Numerical check of algebraic independence at a parameter point.

    Identically-zero derivative columns are dropped (their coefficient is
    pinned to zero by convention); the verdict comes from the singular values
    of the column-normalized probe matrix, and a dependent verdict returns the
    null-space coefficients as a witness.
    """
    rng = np.random.default_rng(seed)
    a, b = pair.default_support
    probe_count = n_probes
    n_funcs = pair.q1 * (pair.q1 + 1) // 2 + pair.q2
    if probe_count < 3 * n_funcs:
        raise ValidationError("n_probes must be at least 3x the basis size")
    xs = rng.uniform(a, b, size=probe_count)
    mat, labels = _basis_functions(pair, np.asarray(theta1), np.asarray(theta2), xs)
    scales = np.max(np.abs(mat), axis=0)
    keep = scales > 1e-14
    reduced = mat[:, keep] / scales[keep]
    if reduced.shape[1] == 0:
        return IndependenceVerdict(False, labels, np.zeros(mat.shape[1]), 0.0, 0.0)
    _, svals, vt = np.linalg.svd(reduced, full_matrices=False)
    ratio = float(svals[-1] / svals[0])
    if ratio > tol and reduced.shape[1] <= reduced.shape[0]:
        return IndependenceVerdict(True, labels, None, None, ratio)
    null = vt[-1]
    witness = np.zeros(mat.shape[1])
    witness[keep] = null / scales[keep]
    witness /= np.linalg.norm(witness)
    resid = float(np.max(np.abs(mat @ witness)))
    return IndependenceVerdict(False, labels, witness, resid, ratio)


# ---------------------------------------------------------------------------
# The rbar polynomial system
# ---------------------------------------------------------------------------


def _alpha_terms(alpha: int):
    """Pairs (n1, n2) with n1 + 2*n2 = alpha and n1 + n2 >= 1."""
    return [(alpha - 2 * n2, n2) for n2 in range(alpha // 2 + 1) if alpha - 2 * n2 + n2 >= 1]


def poly_system_residual(r: int, a, b, c) -> np.ndarray:
    """Residual vector of the order-r system at (a, b, c)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    if not (a.shape == b.shape == c.shape) or a.ndim != 1:
        raise ValidationError("a, b, c must be equal-length vectors")
    out = np.empty(r)
    for alpha in range(1, r + 1):
        total = 0.0
        for n1, n2 in _alpha_terms(alpha):
            total += np.sum(
                c * c * a**n1 * b**n2 / (math.factorial(n1) * math.factorial(n2))
            )
        out[alpha - 1] = total
    return out


@dataclass(frozen=True)
class RbarResult:
    s: int
    value: int
    certificates: dict  # r -> normalized (a, b, c) solution for solvable r
    best_residuals: dict  # r -> best residual norm found
    n_starts: int


def _normalize_triple(a, b, c):
    """Rescale to the canonical gauge max|a| = 1 (system is scale covariant)."""
    m = np.max(np.abs(a))
    if m <= 0:
        return a, b, c
    return a / m, b / m**2, c


def _search_system(s: int, r: int, n_starts: int, seed: int, residual_tol: float):
    """Multi-start least-squares search for a nontrivial solution at order r.

    One coordinate of a is pinned to 1 per start (reachable by rescaling any
    nontrivial solution), nonzero weights are enforced by c = 0.05 + w^2.
    """
    rng = np.random.default_rng(seed)
    best = (np.inf, None)
    for start in range(n_starts):
        pin = start % s

        def unpack(p):
            a = np.empty(s)
            a[pin] = 1.0
            rest = p[: s - 1]
            mask = np.arange(s) != pin
            a[mask] = rest
            b = p[s - 1 : 2 * s - 1]
            c = 0.05 + p[2 * s - 1 :] ** 2
            return a, b, c

        def resid(p):
            a, b, c = unpack(p)
            return poly_system_residual(r, a, b, c)

        p0 = np.concatenate(
            [rng.uniform(-2, 2, s - 1), rng.uniform(-2, 2, s), rng.uniform(0.2, 1.2, s)]
        )
        # Levenberg-Marquardt needs at least as many residuals as variables.
        method = "lm" if r >= len(p0) else "trf"
        try:
            sol = least_squares(resid, p0, method=method, xtol=1e-15, ftol=1e-15, gtol=1e-15)
        except Exception:
            continue
        norm = float(np.linalg.norm(resid(sol.x)))
        if norm < best[0]:
            best = (norm, unpack(sol.x))
        if norm < residual_tol * 1e-2:
            break
    return best


def rbar(
    s: int,
    n_starts: int = 150,
    seed: int = 0,
    residual_tol: float = 1e-10,
    r_max: int = 10,
) -> RbarResult:
    """Smallest order r at which the system has no nontrivial solution.

    Solvable orders carry a solution certificate; the verdict at the returned
    value is the best residual over all starts (a numerical lower-bound
    certificate, not a proof).
    """
    if not 2 <= s <= 4:
        raise ValidationError("rbar is supported for 2 <= s <= 4")
    certificates = {}
    residuals = {}
    for r in range(1, r_max + 1):
        norm, triple = _search_system(s, r, n_starts, seed + 1000 * r, residual_tol)
        residuals[r] = norm
        if norm < residual_tol:
            a, b, c = _normalize_triple(*triple)
            certificates[r] = (a, b, c)
        else:
            return RbarResult(s, r, certificates, residuals, n_starts)
    raise IndeterminateError(
        f"rbar({s}): solutions found at every order up to {r_max}; budget exhausted"
    )


# ---------------------------------------------------------------------------
# Structure polynomials for the squared mean function
# ---------------------------------------------------------------------------


def _base_order(gamma1: int) -> int:
    return (gamma1 + 1) // 2


@dataclass(frozen=True)
class PPolyTable:
    """Coefficient polynomials of d^gamma1/dtheta^gamma1 for h1 = theta^2.

    The derivative expands as
    ``sum_u P_u^{(gamma1)}(theta) d^{base + u} f / d h1^{base + u}``
    with base = ceil(gamma1 / 2) and u = 0 .. floor(gamma1 / 2). Entries map
    (gamma1, u) to {theta exponent: coefficient}.
    """

    gamma_max: int
    entries: dict

    def u_range(self, gamma1: int) -> range:
        return range(gamma1 // 2 + 1)

    def poly(self, gamma1: int, u: int) -> dict:
        if gamma1 > self.gamma_max:
            raise ValidationError(f"table built up to gamma1 = {self.gamma_max}")
        return self.entries.get((gamma1, u), {})

    def eval(self, gamma1: int, u: int, theta: float) -> float:
        return float(sum(coeff * theta**e for e, coeff in self.poly(gamma1, u).items()))


def p_polynomials(gamma_max: int) -> PPolyTable:
    """Build the structure-polynomial table by direct differentiation.

    The chain rule for h1 = theta^2 is carried exactly on the operator basis
    {d^l f / d h1^l}: differentiating a term P(theta) d^l f gives
    P'(theta) d^l f + 2 theta P(theta) d^{l+1} f.
    """
    if gamma_max > 8:
        raise ValidationError("p_polynomials supports gamma_max <= 8")
    entries: dict = {(0, 0): {0: 1.0}}
    # state: l -> {theta exponent: coefficient}
    state = {0: {0: 1.0}}
    for gamma1 in range(1, gamma_max + 1):
        new: dict[int, dict] = {}

        def add(l, e, coeff):
            if coeff:
                dest = new.setdefault(l, {})
                dest[e] = dest.get(e, 0.0) + coeff

        for l, poly in state.items():
            for e, coeff in poly.items():
                if e > 0:
                    add(l, e - 1, e * coeff)
                add(l + 1, e + 1, 2.0 * coeff)
        state = {l: {e: c for e, c in poly.items() if c} for l, poly in new.items()}
        state = {l: poly for l, poly in state.items() if poly}
        base = _base_order(gamma1)
        for l, poly in state.items():
            entries[(gamma1, l - base)] = dict(poly)
    return PPolyTable(gamma_max, entries)


# ---------------------------------------------------------------------------
# The inhomogeneous polynomial-limit system and the rtilde bracket
# ---------------------------------------------------------------------------


def _limit_terms(r: int, table: PPolyTable):
    """Index sets (l, gamma1, gamma2, u) of the 2r ratio numerators."""
    terms: dict[int, list] = {l: [] for l in range(1, 2 * r + 1)}
    for gamma1 in range(0, r + 1):
        for gamma2 in range(0, r + 1 - gamma1):
            if gamma1 + gamma2 < 1:
                continue
            base = _base_order(gamma1)
            for u in table.u_range(gamma1):
                l = base + u + 2 * gamma2
                if 1 <= l <= 2 * r:
                    terms[l].append((gamma1, gamma2, u))
    return terms


def limit_system_residuals(
    theta: float, r: int, a, b, c, table: PPolyTable | None = None
) -> np.ndarray:
    """The 2r ratio values of the polynomial-limit system at (a, b, c)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    if not (a.shape == b.shape == c.shape) or a.ndim != 1:
        raise ValidationError("a, b, c must be equal-length vectors")
    if np.any(c < 0):
        raise ValidationError("c must be nonnegative")
    if table is None:
        table = p_polynomials(min(r, 8))
    if table.gamma_max < r:
        raise ValidationError("table too small for the requested order")
    denom = float(np.sum(c * (np.abs(a) ** r + np.abs(b) ** math.ceil(r / 2))))
    if denom <= 0:
        raise ValidationError("zero denominator: need some nonzero a or b with c > 0")
    terms = _limit_terms(r, table)
    out = np.empty(2 * r)
    for l in range(1, 2 * r + 1):
        total = 0.0
        for gamma1, gamma2, u in terms[l]:
            coeff = table.eval(gamma1, u, theta) / 2.0**gamma2
            coeff /= math.factorial(gamma1) * math.factorial(gamma2)
            total += coeff * np.sum(c * a**gamma1 * b**gamma2)
        out[l - 1] = total / denom
    return out


def _sequence_ratios(theta, r, ahat, bhat, rho, c, t, table):
    return limit_system_residuals(theta, r, ahat * t, bhat * t**rho, c, table)


def _search_vanishing_family(
    theta: float,
    s: int,
    r: int,
    n_starts: int,
    seed: int,
    table: PPolyTable,
    vanish_tol: float = 1e-6,
):
    """Look for a power-law family a_i = ahat_i t, b_i = bhat_i t^rho_i whose
    2r ratios all fall below vanish_tol as t decreases."""
    rng = np.random.default_rng(seed)
    t_fit = (1e-2, 1e-3)
    t_check = np.array([10.0**-k for k in range(2, 13)])
    best = (np.inf, None)
    for _ in range(n_starts):
        p0 = np.concatenate(
            [rng.uniform(-2, 2, s), rng.uniform(-2, 2, s), rng.uniform(0.3, 2.5, s)]
        )

        def unpack(p):
            return p[:s], p[s : 2 * s], np.clip(p[2 * s :], 0.05, 4.0)

        def resid(p):
            ahat, bhat, rho = unpack(p)
            vals = []
            for t in t_fit:
                vals.append(_sequence_ratios(theta, r, ahat, bhat, rho, np.ones(s), t, table))
            return np.concatenate(vals)

        try:
            sol = least_squares(resid, p0, method="lm", xtol=1e-15, ftol=1e-15)
        except Exception:
            continue
        ahat, bhat, rho = unpack(sol.x)
        profile = np.array(
            [
                np.max(
                    np.abs(
                        _sequence_ratios(theta, r, ahat, bhat, rho, np.ones(s), t, table)
                    )
                )
                for t in t_check
            ]
        )
        score = profile[-1]
        if score < best[0]:
            best = (float(score), (ahat, bhat, rho, profile))
        if score < vanish_tol and profile[-1] <= profile[0]:
            return True, best
    found = best[0] < vanish_tol
    return found, best


def rtilde_bracket(
    theta: float,
    s: int,
    n_starts: int = 60,
    seed: int = 0,
    rbar_result: RbarResult | None = None,
) -> dict:
    """Bracket [lower, upper] for the smallest non-vanishing order.

    upper is rbar(s); lower is one more than the largest order at which the
    power-law search produces a vanishing family, floored at 3. A point value
    is only implied when the endpoints coincide.
    """
    if theta == 0:
        raise ValidationError("rtilde_bracket needs theta != 0")
    if s < 2:
        raise ValidationError("rtilde_bracket needs s >= 2")
    rb = rbar_result if rbar_result is not None else rbar(s, seed=seed)
    upper = rb.value
    table = p_polynomials(min(upper, 8))
    lower = 3
    evidence = {}
    for r in range(3, upper):
        found, best = _search_vanishing_family(theta, s, r, n_starts, seed + 17 * r, table)
        evidence[r] = {"found": bool(found), "final_max_ratio": float(best[0])}
        if found:
            lower = max(lower, r + 1)
    lower = min(lower, upper)
    return {
        "theta": theta,
        "s": s,
        "lower": int(lower),
        "upper": int(upper),
        "search_evidence": evidence,
        "n_starts": n_starts,
    }
