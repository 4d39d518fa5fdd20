"""Analytic parameter derivatives of the Gaussian kernel composed with experts.

Let ``f(y | h1, h2sq)`` be the Gaussian density in mean/variance form. The
kernel satisfies the heat-equation identity

.. math::

    \\partial^2 f / \\partial h_1^2 = 2\\, \\partial f / \\partial h_2^2,

so every derivative in the variance argument can be rewritten as half of a
second mean derivative. All theta-partials of the composed density therefore
live in the operator basis ``{x^a * d^l f / d h1^l}``, and the pure mean
derivatives have the Hermite closed form

.. math::

    d^l f / d h_1^l = \\sigma^{-l} He_l((y - h_1)/\\sigma) f,

with ``He_l`` the probabilists' Hermite polynomial.

The engine below carries the chain rule symbolically: a derivative state maps
the mean-derivative order ``l`` to a polynomial in theta (with numeric,
x-dependent coefficients), and differentiating in a theta coordinate updates
the polynomials exactly. Since every catalog family has theta-polynomial
``h1``/``h2sq``, the expansion is exact at any order; the per-family order
caps only honor the documented capability contract.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import CapabilityError, ValidationError
from .model import ExpertPair, ThetaPoly, _poly_eval, _poly_partial

__all__ = [
    "hermite_e",
    "gaussian_h1_derivative",
    "operator_expansion",
    "density_theta_partial",
]


def hermite_e(l: int, z):
    """Probabilists' Hermite polynomial He_l(z) via the three-term recurrence."""
    z = np.asarray(z, dtype=float)
    prev = np.ones_like(z)
    if l == 0:
        return prev
    cur = z.copy()
    for j in range(1, l):
        prev, cur = cur, z * cur - j * prev
    return cur


def gaussian_h1_derivative(l: int, y, h1, h2sq):
    """d^l f / d h1^l for the Gaussian density f(y | h1, h2sq)."""
    y = np.asarray(y, dtype=float)
    h2sq = np.asarray(h2sq, dtype=float)
    if np.any(h2sq <= 0):
        raise ValidationError("gaussian_h1_derivative needs h2sq > 0")
    sigma = np.sqrt(h2sq)
    z = (y - np.asarray(h1, dtype=float)) / sigma
    f = np.exp(-0.5 * z * z) / (sigma * math.sqrt(2 * math.pi))
    out = sigma ** (-l) * hermite_e(l, z) * f
    return out if out.ndim else float(out)


def _differentiate_state(
    state: dict[int, ThetaPoly],
    grad_coord: ThetaPoly,
    coord_index: int,
    dim: int,
    is_variance: bool,
) -> dict[int, ThetaPoly]:
    """One theta-coordinate derivative of sum_l c_l(theta) d^l f / d h1^l.

    grad_coord is the theta-polynomial for dh1/dtheta_u (or dh2sq/dtheta_u);
    variance derivatives enter through (1/2) d^2/dh1^2.
    """
    shift = 2 if is_variance else 1
    factor = 0.5 if is_variance else 1.0
    order = tuple(1 if j == coord_index else 0 for j in range(dim))
    out: dict[int, ThetaPoly] = {}

    def _add(l: int, poly: ThetaPoly, scale: float = 1.0):
        dest = out.setdefault(l, {})
        for mono, coeff in poly.items():
            dest[mono] = dest.get(mono, 0.0) + scale * coeff

    for l, poly in state.items():
        _add(l, _poly_partial(poly, order))
        _add(l + shift, _poly_mul(poly, grad_coord), factor)
    return {l: p for l, p in out.items() if p}


def _poly_mul(a: ThetaPoly, b: ThetaPoly) -> ThetaPoly:
    out: ThetaPoly = {}
    for ma, ca in a.items():
        for mb, cb in b.items():
            mono = tuple(i + j for i, j in zip(ma, mb))
            out[mono] = out.get(mono, 0.0) + ca * cb
    return out


def _embed(poly: ThetaPoly, dim: int, offset: int) -> ThetaPoly:
    """Lift a block-local theta-polynomial into the concatenated theta space."""
    out: ThetaPoly = {}
    for mono, coeff in poly.items():
        full = [0] * dim
        for j, m in enumerate(mono):
            full[offset + j] = m
        out[tuple(full)] = coeff
    return out


def operator_expansion(
    pair: ExpertPair,
    x,
    alpha: Sequence[int],
    beta: Sequence[int],
) -> dict[int, ThetaPoly]:
    """Expansion of d^{|alpha|+|beta|} f / d theta1^alpha d theta2^beta.

    Returns a map l -> theta-polynomial c_l such that the partial equals
    sum_l c_l(theta) * d^l f / d h1^l at covariate x. Monomials run over the
    concatenated (theta1, theta2) coordinates.
    """
    alpha = tuple(int(a) for a in alpha)
    beta = tuple(int(b) for b in beta)
    if len(alpha) != pair.q1 or len(beta) != pair.q2:
        raise ValidationError("alpha/beta lengths must match (q1, q2)")
    if any(a < 0 for a in alpha) or any(b < 0 for b in beta):
        raise ValidationError("derivative multi-indices must be nonnegative")
    total = sum(alpha) + sum(beta)
    cap = pair.max_partial_order
    if cap is not None and total > cap:
        raise CapabilityError(
            f"{pair.family_id}: theta-partials supported up to total order {cap}, got {total}"
        )
    dim = pair.q1 + pair.q2
    h1p = {u: _embed(pair.h1_poly(x), dim, 0) for u in range(pair.q1)}
    grads1 = {
        u: _poly_partial(h1p[u], tuple(1 if j == u else 0 for j in range(dim)))
        for u in range(pair.q1)
    }
    h2p = _embed(pair.h2sq_poly(x), dim, pair.q1)
    grads2 = {
        v: _poly_partial(h2p, tuple(1 if j == pair.q1 + v else 0 for j in range(dim)))
        for v in range(pair.q2)
    }
    state: dict[int, ThetaPoly] = {0: {tuple([0] * dim): 1.0}}
    for u in range(pair.q1):
        for _ in range(alpha[u]):
            state = _differentiate_state(state, grads1[u], u, dim, is_variance=False)
    for v in range(pair.q2):
        for _ in range(beta[v]):
            state = _differentiate_state(state, grads2[v], pair.q1 + v, dim, is_variance=True)
    return state


def density_theta_partial(
    pair: ExpertPair,
    theta1,
    theta2,
    x,
    y,
    alpha: Sequence[int],
    beta: Sequence[int],
):
    """Value of the theta-partial of f(y | h1(x, theta1), h2sq(x, theta2))."""
    expansion = operator_expansion(pair, x, alpha, beta)
    theta = np.concatenate(
        [np.asarray(theta1, dtype=float), np.asarray(theta2, dtype=float)]
    )
    h1 = pair.h1(x, theta1)
    h2sq = pair.h2sq(x, theta2)
    total = 0.0
    for l, poly in expansion.items():
        total = total + _poly_eval(poly, theta) * gaussian_h1_derivative(l, y, h1, h2sq)
    out = np.asarray(total)
    return out if out.ndim else float(out)
