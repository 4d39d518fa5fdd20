"""Core model objects for Gaussian mixtures of experts with covariate-free gating.

A model is a discrete mixing measure ``G = sum_i pi_i delta_{(theta1_i, theta2_i)}``
together with an expert pair ``(h1, h2^2)`` from a fixed catalog. The conditional
density of the response given the covariate is

.. math::

    g_G(y | x) = \\sum_i \\pi_i \\, N(y;\\ h_1(x, \\theta_{1i}),\\ h_2^2(x, \\theta_{2i}))

and the joint density is ``p_G(x, y) = g_G(y|x) fbar(x)`` for a covariate prior
``fbar`` supported on a compact interval.

Every catalog family has mean and variance functions that are polynomial in the
parameter blocks, so exact parameter partials of any order are available through
small polynomial tables (see :func:`h1_partials` / :func:`h2sq_partials`).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ValidationError

__all__ = [
    "ExpertPair",
    "MixingMeasure",
    "CovariatePrior",
    "Dataset",
    "expert_pair",
    "FAMILY_IDS",
    "gaussian_density",
    "conditional_density",
    "joint_density",
    "sample",
    "h1_partials",
    "h2sq_partials",
    "measure_to_json",
    "measure_from_json",
    "dataset_to_csv",
    "dataset_from_csv",
]

# A theta-polynomial is a map from a multi-index over the parameter block to a
# coefficient that may depend on x (numpy-broadcastable).
ThetaPoly = dict[tuple[int, ...], "float | np.ndarray"]


def _lin_h1_poly(x):
    return {(1, 0): 1.0, (0, 1): x}


def _quad_h1_poly(x):
    # (t1 + t2 x)^2 expanded in (t1, t2)
    return {(2, 0): 1.0 + 0.0 * x, (1, 1): 2.0 * x, (0, 2): x * x}


@dataclass(frozen=True)
class _FamilySpec:
    q1: int
    q2: int
    h1: Callable
    h2sq: Callable
    h1_poly: Callable[[object], ThetaPoly]
    h2sq_poly: Callable[[object], ThetaPoly]
    default_theta1_box: tuple[tuple[float, float], ...]
    default_theta2_box: tuple[tuple[float, float], ...]
    default_support: tuple[float, float]
    # None means exact partials of the composed density at any order.
    max_partial_order: int | None


_FAMILIES: dict[str, _FamilySpec] = {
    "LIN_CONST": _FamilySpec(
        q1=2,
        q2=1,
        h1=lambda x, t1: t1[0] + t1[1] * x,
        h2sq=lambda x, t2: t2[0] + 0.0 * x,
        h1_poly=_lin_h1_poly,
        h2sq_poly=lambda x: {(1,): 1.0 + 0.0 * x},
        default_theta1_box=((-5.0, 5.0), (-5.0, 5.0)),
        default_theta2_box=((0.05, 10.0),),
        default_support=(0.0, 1.0),
        max_partial_order=None,
    ),
    "LIN_X2": _FamilySpec(
        q1=2,
        q2=1,
        h1=lambda x, t1: t1[0] + t1[1] * x,
        h2sq=lambda x, t2: t2[0] * x * x,
        h1_poly=_lin_h1_poly,
        h2sq_poly=lambda x: {(1,): x * x},
        default_theta1_box=((-5.0, 5.0), (-5.0, 5.0)),
        default_theta2_box=((0.05, 10.0),),
        default_support=(0.1, 1.1),
        max_partial_order=None,
    ),
    "LIN_OFFSET": _FamilySpec(
        q1=2,
        q2=2,
        h1=lambda x, t1: t1[0] + t1[1] * x,
        h2sq=lambda x, t2: t2[0] + t2[1] * x * x,
        h1_poly=_lin_h1_poly,
        h2sq_poly=lambda x: {(1, 0): 1.0 + 0.0 * x, (0, 1): x * x},
        default_theta1_box=((-5.0, 5.0), (-5.0, 5.0)),
        default_theta2_box=((0.05, 10.0), (0.0, 10.0)),
        default_support=(0.0, 1.0),
        max_partial_order=None,
    ),
    "SLOPE_CONST": _FamilySpec(
        q1=1,
        q2=1,
        h1=lambda x, t1: t1[0] * x,
        h2sq=lambda x, t2: t2[0] + 0.0 * x,
        h1_poly=lambda x: {(1,): x},
        h2sq_poly=lambda x: {(1,): 1.0 + 0.0 * x},
        default_theta1_box=((-5.0, 5.0),),
        default_theta2_box=((0.05, 10.0),),
        default_support=(0.0, 1.0),
        max_partial_order=None,
    ),
    "POWM_LINX": _FamilySpec(
        q1=2,
        q2=1,
        h1=lambda x, t1: (t1[0] + t1[1] * x) ** 2,
        h2sq=lambda x, t2: t2[0] * x,
        h1_poly=_quad_h1_poly,
        h2sq_poly=lambda x: {(1,): x},
        default_theta1_box=((-5.0, 5.0), (-5.0, 5.0)),
        default_theta2_box=((0.05, 10.0),),
        default_support=(0.1, 1.1),
        max_partial_order=6,
    ),
    "QUAD_CONST": _FamilySpec(
        q1=2,
        q2=1,
        h1=lambda x, t1: (t1[0] + t1[1] * x) ** 2,
        h2sq=lambda x, t2: t2[0] + 0.0 * x,
        h1_poly=_quad_h1_poly,
        h2sq_poly=lambda x: {(1,): 1.0 + 0.0 * x},
        default_theta1_box=((-5.0, 5.0), (-5.0, 5.0)),
        default_theta2_box=((0.05, 10.0),),
        default_support=(0.0, 1.0),
        max_partial_order=6,
    ),
}

FAMILY_IDS = tuple(_FAMILIES)


@dataclass(frozen=True)
class ExpertPair:
    """A declared pair (h1, h2^2) from the expert catalog.

    ``domain_boxes`` are closed per-coordinate intervals, theta1 block first,
    then the theta2 block; they must keep ``h2^2 > 0`` over the covariate
    support, which the catalog defaults guarantee.
    """

    family_id: str
    theta1_box: tuple[tuple[float, float], ...]
    theta2_box: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if self.family_id not in _FAMILIES:
            raise ValidationError(f"unknown expert family {self.family_id!r}")
        spec = _FAMILIES[self.family_id]
        if len(self.theta1_box) != spec.q1 or len(self.theta2_box) != spec.q2:
            raise ValidationError(
                f"{self.family_id}: domain boxes must have q1={spec.q1}, q2={spec.q2} intervals"
            )
        for lo, hi in (*self.theta1_box, *self.theta2_box):
            if not (lo <= hi):
                raise ValidationError("domain box interval has lo > hi")

    @property
    def _spec(self) -> _FamilySpec:
        return _FAMILIES[self.family_id]

    @property
    def q1(self) -> int:
        return self._spec.q1

    @property
    def q2(self) -> int:
        return self._spec.q2

    @property
    def max_partial_order(self) -> int | None:
        return self._spec.max_partial_order

    @property
    def default_support(self) -> tuple[float, float]:
        return self._spec.default_support

    @property
    def domain_boxes(self) -> tuple[tuple[float, float], ...]:
        return (*self.theta1_box, *self.theta2_box)

    def h1(self, x, theta1):
        return self._spec.h1(np.asarray(x, dtype=float), np.asarray(theta1, dtype=float))

    def h2sq(self, x, theta2):
        return self._spec.h2sq(np.asarray(x, dtype=float), np.asarray(theta2, dtype=float))

    def h1_poly(self, x) -> ThetaPoly:
        return self._spec.h1_poly(np.asarray(x, dtype=float))

    def h2sq_poly(self, x) -> ThetaPoly:
        return self._spec.h2sq_poly(np.asarray(x, dtype=float))

    def contains(self, theta1, theta2, tol: float = 1e-9) -> bool:
        for v, (lo, hi) in zip(theta1, self.theta1_box):
            if v < lo - tol or v > hi + tol:
                return False
        for v, (lo, hi) in zip(theta2, self.theta2_box):
            if v < lo - tol or v > hi + tol:
                return False
        return True

    def clip(self, theta1, theta2):
        t1 = np.array([min(max(v, lo), hi) for v, (lo, hi) in zip(theta1, self.theta1_box)])
        t2 = np.array([min(max(v, lo), hi) for v, (lo, hi) in zip(theta2, self.theta2_box)])
        return t1, t2


def expert_pair(
    family_id: str,
    theta1_box: Sequence[Sequence[float]] | None = None,
    theta2_box: Sequence[Sequence[float]] | None = None,
) -> ExpertPair:
    """Build an :class:`ExpertPair`, filling in catalog default domain boxes."""
    if family_id not in _FAMILIES:
        raise ValidationError(f"unknown expert family {family_id!r}")
    spec = _FAMILIES[family_id]
    t1 = spec.default_theta1_box if theta1_box is None else tuple(
        (float(lo), float(hi)) for lo, hi in theta1_box
    )
    t2 = spec.default_theta2_box if theta2_box is None else tuple(
        (float(lo), float(hi)) for lo, hi in theta2_box
    )
    return ExpertPair(family_id, t1, t2)


@dataclass(frozen=True)
class MixingMeasure:
    """Discrete measure ``sum_i weights[i] * delta_{(theta1[i], theta2[i])}``.

    Zero weights are permitted (witness sequences use them transiently); the
    fitter works on a restricted space that excludes them.
    """

    theta1: np.ndarray  # (k, q1)
    theta2: np.ndarray  # (k, q2)
    weights: np.ndarray  # (k,)

    def __post_init__(self):
        t1 = np.atleast_2d(np.asarray(self.theta1, dtype=float))
        t2 = np.atleast_2d(np.asarray(self.theta2, dtype=float))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "theta1", t1)
        object.__setattr__(self, "theta2", t2)
        object.__setattr__(self, "weights", w)
        if t1.shape[0] != t2.shape[0] or t1.shape[0] != w.shape[0]:
            raise ValidationError("atom blocks and weights must have equal length")
        if w.shape[0] < 1:
            raise ValidationError("a mixing measure needs at least one atom")
        if np.any(w < -1e-15):
            raise ValidationError("weights must be nonnegative")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise ValidationError(f"weights sum to {w.sum():.17g}, not 1 within 1e-12")

    @property
    def k(self) -> int:
        return int(self.weights.shape[0])

    def atom_matrix(self) -> np.ndarray:
        """Atoms as rows of the concatenated (theta1, theta2) parameter space."""
        return np.hstack([self.theta1, self.theta2])

    def validate_domain(self, pair: ExpertPair) -> None:
        if self.theta1.shape[1] != pair.q1 or self.theta2.shape[1] != pair.q2:
            raise ValidationError("atom parameter dimensions do not match the expert pair")
        for i in range(self.k):
            if not pair.contains(self.theta1[i], self.theta2[i]):
                raise ValidationError(f"atom {i} lies outside the expert domain boxes")


@dataclass(frozen=True)
class CovariatePrior:
    """Covariate prior ``fbar`` on a compact interval.

    kind is "UNIFORM" (params a, b) or "TRUNCATED_GAUSSIAN" (params mu, sigma,
    a, b, with the Gaussian renormalized to [a, b]).
    """

    kind: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.kind == "UNIFORM":
            a, b = self.params
            if not a < b:
                raise ValidationError("UNIFORM prior needs a < b")
        elif self.kind == "TRUNCATED_GAUSSIAN":
            mu, sigma, a, b = self.params
            if not (a < b and sigma > 0):
                raise ValidationError("TRUNCATED_GAUSSIAN prior needs a < b and sigma > 0")
        else:
            raise ValidationError(f"unknown prior kind {self.kind!r}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    @property
    def support(self) -> tuple[float, float]:
        if self.kind == "UNIFORM":
            return self.params
        return self.params[2], self.params[3]

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        a, b = self.support
        inside = (x >= a) & (x <= b)
        if self.kind == "UNIFORM":
            dens = np.where(inside, 1.0 / (b - a), 0.0)
        else:
            mu, sigma, _, _ = self.params
            z = (x - mu) / sigma
            mass = 0.5 * (
                math.erf((b - mu) / (sigma * math.sqrt(2)))
                - math.erf((a - mu) / (sigma * math.sqrt(2)))
            )
            dens = np.where(
                inside,
                np.exp(-0.5 * z * z) / (sigma * math.sqrt(2 * math.pi) * mass),
                0.0,
            )
        return dens if dens.ndim else float(dens)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        a, b = self.support
        if self.kind == "UNIFORM":
            return rng.uniform(a, b, size=n)
        mu, sigma, _, _ = self.params
        # Inverse-CDF sampling keeps determinism tied to a single uniform draw.
        lo = 0.5 * (1 + math.erf((a - mu) / (sigma * math.sqrt(2))))
        hi = 0.5 * (1 + math.erf((b - mu) / (sigma * math.sqrt(2))))
        u = rng.uniform(lo, hi, size=n)
        from scipy.special import ndtri

        return mu + sigma * ndtri(u)


def uniform_prior(a: float, b: float) -> CovariatePrior:
    return CovariatePrior("UNIFORM", (a, b))


@dataclass(frozen=True)
class Dataset:
    """Paired covariate/response samples plus the seed that produced them."""

    xs: np.ndarray
    ys: np.ndarray
    seed: int

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        ys = np.asarray(self.ys, dtype=float)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        if xs.shape != ys.shape or xs.ndim != 1:
            raise ValidationError("xs and ys must be equal-length vectors")

    @property
    def n(self) -> int:
        return int(self.xs.shape[0])


def gaussian_density(y, mu, sigma2):
    """Density of N(mu, sigma2) at y; rejects non-positive variance."""
    sigma2_arr = np.asarray(sigma2, dtype=float)
    if np.any(sigma2_arr <= 0):
        raise ValidationError("gaussian_density needs sigma2 > 0")
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    out = np.exp(-0.5 * (y - mu) ** 2 / sigma2_arr) / np.sqrt(2 * math.pi * sigma2_arr)
    return out if out.ndim else float(out)


def _component_mean_var(pair: ExpertPair, g: MixingMeasure, x):
    """Means and variances of every component at covariate x; shapes (k, ...)."""
    x = np.asarray(x, dtype=float)
    mus = np.stack([np.broadcast_to(pair.h1(x, g.theta1[i]), x.shape) for i in range(g.k)])
    v = np.stack([np.broadcast_to(pair.h2sq(x, g.theta2[i]), x.shape) for i in range(g.k)])
    return mus, v


def conditional_density(pair: ExpertPair, g: MixingMeasure, x, y, validate: bool = True):
    """Mixture conditional density g_G(y | x); strictly positive."""
    if validate:
        g.validate_domain(pair)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    shape = np.broadcast_shapes(x.shape, y.shape)
    xb = np.broadcast_to(x, shape)
    yb = np.broadcast_to(y, shape)
    mus, variances = _component_mean_var(pair, g, xb)
    if np.any(variances <= 0):
        raise ValidationError("h2^2 must stay positive over the covariate support")
    dens = np.einsum(
        "k,k...->...",
        g.weights,
        np.exp(-0.5 * (yb - mus) ** 2 / variances) / np.sqrt(2 * math.pi * variances),
    )
    return dens if dens.ndim else float(dens)


def joint_density(pair: ExpertPair, prior: CovariatePrior, g: MixingMeasure, x, y):
    """Joint density p_G(x, y) = g_G(y|x) fbar(x); zero outside the support."""
    fx = prior.pdf(x)
    a, b = prior.support
    x = np.asarray(x, dtype=float)
    # Clip only for evaluating the conditional; the prior factor already zeroes
    # out-of-support points.
    xc = np.clip(x, a, b)
    cond = conditional_density(pair, g, xc, y)
    out = np.asarray(fx) * np.asarray(cond)
    return out if out.ndim else float(out)


def sample(
    pair: ExpertPair,
    prior: CovariatePrior,
    g: MixingMeasure,
    n: int,
    seed: int,
) -> Dataset:
    """Draw n i.i.d. (X, Y) pairs; deterministic given the seed."""
    if n < 1:
        raise ValidationError("sample needs n >= 1")
    g.validate_domain(pair)
    rng = np.random.default_rng(seed)
    xs = prior.sample(n, rng)
    comps = rng.choice(g.k, size=n, p=g.weights / g.weights.sum())
    mus = np.empty(n)
    sds = np.empty(n)
    for i in range(g.k):
        mask = comps == i
        if not np.any(mask):
            continue
        mus[mask] = pair.h1(xs[mask], g.theta1[i])
        sds[mask] = np.sqrt(pair.h2sq(xs[mask], g.theta2[i]))
    ys = mus + sds * rng.standard_normal(n)
    return Dataset(xs, ys, seed)


def _poly_partial(poly: ThetaPoly, order: Sequence[int]) -> ThetaPoly:
    order = tuple(int(o) for o in order)
    out: ThetaPoly = {}
    for mono, coeff in poly.items():
        if any(o > m for o, m in zip(order, mono)):
            continue
        fac = 1.0
        for o, m in zip(order, mono):
            fac *= math.perm(m, o)
        new = tuple(m - o for m, o in zip(mono, order))
        out[new] = out.get(new, 0.0) + fac * coeff
    return out


def _poly_eval(poly: ThetaPoly, theta) -> "float | np.ndarray":
    theta = np.asarray(theta, dtype=float)
    total = 0.0
    for mono, coeff in poly.items():
        term = coeff
        for t, m in zip(theta, mono):
            if m:
                term = term * t**m
        total = total + term
    return total


def h1_partials(pair: ExpertPair, x, theta1, order: Sequence[int]):
    """Exact partial of h1 with respect to theta1 at multi-index ``order``."""
    if len(order) != pair.q1:
        raise ValidationError("order multi-index must have length q1")
    return _poly_eval(_poly_partial(pair.h1_poly(x), order), theta1)


def h2sq_partials(pair: ExpertPair, x, theta2, order: Sequence[int]):
    """Exact partial of h2^2 with respect to theta2 at multi-index ``order``."""
    if len(order) != pair.q2:
        raise ValidationError("order multi-index must have length q2")
    return _poly_eval(_poly_partial(pair.h2sq_poly(x), order), theta2)


def measure_to_json(pair: ExpertPair, g: MixingMeasure) -> dict:
    return {
        "family": pair.family_id,
        "domain": [list(box) for box in pair.domain_boxes],
        "atoms": [
            {
                "theta1": [float(v) for v in g.theta1[i]],
                "theta2": [float(v) for v in g.theta2[i]],
                "weight": float(g.weights[i]),
            }
            for i in range(g.k)
        ],
    }


def measure_from_json(doc: dict) -> tuple[ExpertPair, MixingMeasure]:
    try:
        family = doc["family"]
        domain = doc.get("domain")
        atoms = doc["atoms"]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed measure document: missing {exc}") from exc
    spec = _FAMILIES.get(family)
    if spec is None:
        raise ValidationError(f"unknown expert family {family!r}")
    if domain is None:
        pair = expert_pair(family)
    else:
        pair = expert_pair(family, domain[: spec.q1], domain[spec.q1 :])
    theta1 = np.array([a["theta1"] for a in atoms], dtype=float)
    theta2 = np.array([a["theta2"] for a in atoms], dtype=float)
    weights = np.array([a["weight"] for a in atoms], dtype=float)
    g = MixingMeasure(theta1, theta2, weights)
    g.validate_domain(pair)
    return pair, g


def load_measure(path: str) -> tuple[ExpertPair, MixingMeasure]:
    with open(path) as fh:
        return measure_from_json(json.load(fh))


def dataset_to_csv(data: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["x", "y"])
    for x, y in zip(data.xs, data.ys):
        writer.writerow([f"{x:.17g}", f"{y:.17g}"])
    return buf.getvalue()


def dataset_from_csv(text: str, seed: int = 0) -> Dataset:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["x", "y"]:
        raise ValidationError('dataset CSV must start with header "x,y"')
    xs, ys = [], []
    for row in reader:
        if not row:
            continue
        xs.append(float(row[0]))
        ys.append(float(row[1]))
    return Dataset(np.array(xs), np.array(ys), seed)
