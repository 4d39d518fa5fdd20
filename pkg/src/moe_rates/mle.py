"""Maximum-likelihood fitting of an over-specified mixture by multi-start EM.

Each EM iteration computes responsibilities, then updates weights (mean
responsibility followed by Euclidean projection onto the simplex with an
optional floor), then component parameters: closed-form weighted least
squares where the mean function is linear in theta1, a closed-form
responsibility-weighted residual moment where the variance is a free
constant, and otherwise a few damped Newton steps on the expected
complete-data objective with projection onto the domain boxes. Every
sub-update is accepted only if it does not decrease the expected objective,
which keeps the recorded log-likelihood trace monotone up to the documented
slack. Components that lose all responsibility are re-seeded at a random
data-adjacent point, and the restart is recorded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ValidationError
from .model import Dataset, ExpertPair, MixingMeasure

__all__ = ["FitConfig", "FitResult", "loglik", "em_fit", "multistart_init", "project_simplex_floor"]

_LINEAR_MEAN = {"LIN_CONST", "LIN_X2", "LIN_OFFSET", "SLOPE_CONST"}
_CONST_VARIANCE = {"LIN_CONST", "SLOPE_CONST", "QUAD_CONST"}


@dataclass(frozen=True)
class FitConfig:
    k: int
    weight_floor: float = 0.0
    n_starts: int = 20
    max_iters: int = 300
    loglik_tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.n_starts < 1 or self.max_iters < 1:
            raise ValidationError("k, n_starts and max_iters must be positive")
        if self.loglik_tol <= 0:
            raise ValidationError("loglik_tol must be positive")
        if self.weight_floor < 0 or self.weight_floor * self.k > 1 + 1e-12:
            raise ValidationError("weight_floor must satisfy 0 <= floor * k <= 1")


@dataclass(frozen=True)
class FitResult:
    g_hat: MixingMeasure
    loglik: float
    iters: int
    converged: bool
    loglik_trace: np.ndarray
    restarts: int = 0
    start_index: int = 0
    all_traces: tuple = field(default=(), repr=False)


def loglik(pair: ExpertPair, g: MixingMeasure, data: Dataset) -> float:
    """Conditional log-likelihood sum_i log g_G(y_i | x_i)."""
    if data.n == 0:
        raise ValidationError("loglik needs a nonempty dataset")
    return float(_log_mixture(pair, g, data.xs, data.ys)[0].sum())


def _log_mixture(pair, g, xs, ys):
    """Rowwise log density and per-component log joints (n, k)."""
    k = g.k
    comp = np.empty((len(xs), k))
    logw = np.log(np.maximum(g.weights, 1e-300))
    for j in range(k):
        mu = pair.h1(xs, g.theta1[j])
        var = pair.h2sq(xs, g.theta2[j])
        comp[:, j] = logw[j] - 0.5 * np.log(2 * math.pi * var) - 0.5 * (ys - mu) ** 2 / var
    row = logsumexp(comp, axis=1)
    return row, comp


def project_simplex_floor(w: np.ndarray, floor: float) -> np.ndarray:
    """Euclidean projection onto {pi : sum pi = 1, pi >= floor}."""
    k = len(w)
    if floor * k > 1 + 1e-12:
        raise ValidationError("floor too large for the simplex")
    # Shift to the free part sigma = pi - floor, mass 1 - k * floor.
    mass = 1.0 - floor * k
    v = w - floor
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - mass
    idx = np.arange(1, k + 1)
    cond = u - css / idx > 0
    rho = int(np.nonzero(cond)[0][-1]) + 1
    tau = css[rho - 1] / rho
    return np.maximum(v - tau, 0.0) + floor


def _weighted_q(pair, xs, ys, resp_j, theta1, theta2):
    """Expected complete-data objective term for one component (no weight part)."""
    mu = pair.h1(xs, theta1)
    var = pair.h2sq(xs, theta2)
    if np.any(var <= 0):
        return -np.inf
    return float(
        np.sum(resp_j * (-0.5 * np.log(2 * math.pi * var) - 0.5 * (ys - mu) ** 2 / var))
    )


def _q_grad(pair, xs, ys, resp_j, theta1, theta2, block):
    """Analytic gradient of the component objective in one parameter block."""
    mu = pair.h1(xs, theta1)
    var = pair.h2sq(xs, theta2)
    e = ys - mu
    if block == 1:
        grads = []
        for u in range(pair.q1):
            order = tuple(1 if j == u else 0 for j in range(pair.q1))
            from .model import h1_partials

            dmu = h1_partials(pair, xs, theta1, order)
            grads.append(np.sum(resp_j * e / var * dmu))
        return np.array(grads)
    grads = []
    for v in range(pair.q2):
        order = tuple(1 if j == v else 0 for j in range(pair.q2))
        from .model import h2sq_partials

        dvar = h2sq_partials(pair, xs, theta2, order)
        grads.append(np.sum(resp_j * (e * e / (2 * var * var) - 0.5 / var) * dvar))
    return np.array(grads)


def _damped_accept(pair, xs, ys, resp_j, old1, old2, cand1, cand2, max_halvings=20):
    """Move toward the candidate while the objective does not decrease."""
    q_old = _weighted_q(pair, xs, ys, resp_j, old1, old2)
    t1, t2 = cand1, cand2
    for _ in range(max_halvings + 1):
        if _weighted_q(pair, xs, ys, resp_j, t1, t2) >= q_old - 1e-12:
            return t1, t2
        t1 = 0.5 * (t1 + old1)
        t2 = 0.5 * (t2 + old2)
    return old1, old2


def _newton_block(pair, xs, ys, resp_j, theta1, theta2, block, steps=5):
    """Damped Newton on one parameter block with box projection."""
    box = pair.theta1_box if block == 1 else pair.theta2_box
    cur = np.array(theta1 if block == 1 else theta2, dtype=float)
    other = np.array(theta2 if block == 1 else theta1, dtype=float)

    def pack(v):
        return (v, other) if block == 1 else (other, v)

    for _ in range(steps):
        t1, t2 = pack(cur)
        g = _q_grad(pair, xs, ys, resp_j, t1, t2, block)
        h = np.empty((len(cur), len(cur)))
        step = 1e-5
        for idx in range(len(cur)):
            bumped = cur.copy()
            bumped[idx] += step
            tp = pack(bumped)
            bumped2 = cur.copy()
            bumped2[idx] -= step
            tm = pack(bumped2)
            h[:, idx] = (
                _q_grad(pair, xs, ys, resp_j, *tp, block)
                - _q_grad(pair, xs, ys, resp_j, *tm, block)
            ) / (2 * step)
        h = 0.5 * (h + h.T)
        try:
            direction = np.linalg.solve(h, -g)
            if g @ direction < 0:  # not an ascent direction, fall back
                direction = g / (np.linalg.norm(g) + 1e-12)
        except np.linalg.LinAlgError:
            direction = g / (np.linalg.norm(g) + 1e-12)
        cand = np.array([min(max(v, lo), hi) for v, (lo, hi) in zip(cur + direction, box)])
        t1c, t2c = pack(cand)
        t1o, t2o = pack(cur)
        a1, a2 = _damped_accept(pair, xs, ys, resp_j, t1o, t2o, t1c, t2c)
        cur = a1 if block == 1 else a2
    return cur


def _design(pair, xs):
    if pair.family_id == "SLOPE_CONST":
        return xs[:, None]
    return np.column_stack([np.ones_like(xs), xs])


def _update_component(pair, xs, ys, resp_j, theta1, theta2):
    """M-step parameter update for one component; monotone in the objective."""
    theta1 = np.asarray(theta1, dtype=float)
    theta2 = np.asarray(theta2, dtype=float)
    # Mean block.
    if pair.family_id in _LINEAR_MEAN:
        var = pair.h2sq(xs, theta2)
        w = resp_j / var
        phi = _design(pair, xs)
        sw = np.sqrt(np.maximum(w, 0.0))
        beta, *_ = np.linalg.lstsq(sw[:, None] * phi, sw * ys, rcond=None)
        cand1 = np.array([min(max(v, lo), hi) for v, (lo, hi) in zip(beta, pair.theta1_box)])
        theta1, theta2 = _damped_accept(pair, xs, ys, resp_j, theta1, theta2, cand1, theta2)
    else:
        theta1 = _newton_block(pair, xs, ys, resp_j, theta1, theta2, block=1)
    # Variance block.
    if pair.family_id in _CONST_VARIANCE:
        mu = pair.h1(xs, theta1)
        total = resp_j.sum()
        moment = float(np.sum(resp_j * (ys - mu) ** 2) / max(total, 1e-300))
        lo, hi = pair.theta2_box[0]
        cand2 = np.array([min(max(moment, lo), hi)])
        theta1, theta2 = _damped_accept(pair, xs, ys, resp_j, theta1, theta2, theta1, cand2)
    else:
        theta2 = _newton_block(pair, xs, ys, resp_j, theta1, theta2, block=2)
    return theta1, theta2


def multistart_init(
    pair: ExpertPair, data: Dataset, k: int, seed: int
) -> MixingMeasure:
    """Data-adjacent random initialization inside the domain boxes."""
    if data.n < k:
        raise ValidationError("need at least k data points to initialize")
    rng = np.random.default_rng(seed)
    theta1 = np.empty((k, pair.q1))
    theta2 = np.empty((k, pair.q2))
    sub_size = max(2, min(data.n, max(10, data.n // k)))
    for j in range(k):
        idx = rng.choice(data.n, size=sub_size, replace=False)
        xs, ys = data.xs[idx], data.ys[idx]
        phi = _design(pair, xs) if pair.family_id != "SLOPE_CONST" else xs[:, None]
        if pair.family_id in _LINEAR_MEAN:
            target = ys
        else:
            # Quadratic mean families: fit the linear pre-image of the mean.
            target = rng.choice([-1.0, 1.0]) * np.sqrt(np.maximum(ys, 1e-6))
            phi = np.column_stack([np.ones_like(xs), xs])
        beta, *_ = np.linalg.lstsq(phi, target, rcond=None)
        scale = np.std(ys - phi @ beta) + 0.1
        beta = beta + rng.normal(0, 0.5 * scale, size=len(beta))
        resid_var = float(np.var(ys - phi @ beta)) + 1e-3
        if pair.family_id in ("LIN_X2", "POWM_LINX"):
            denom = float(np.mean(xs * xs if pair.family_id == "LIN_X2" else xs))
            resid_var /= max(denom, 1e-6)
        t2 = np.full(pair.q2, resid_var * math.exp(rng.uniform(-0.5, 0.5)))
        if pair.q2 == 2:
            t2[1] = resid_var * math.exp(rng.uniform(-0.5, 0.5))
        theta1[j], theta2[j] = pair.clip(beta[: pair.q1], t2)
    weights = np.full(k, 1.0 / k)
    return MixingMeasure(theta1, theta2, weights)


def _single_em(pair, data, config, init, rng):
    xs, ys = data.xs, data.ys
    g = init
    trace = []
    restarts = 0
    converged = False
    for it in range(config.max_iters):
        row, comp = _log_mixture(pair, g, xs, ys)
        trace.append(float(row.sum()))
        resp = np.exp(comp - row[:, None])
        col = resp.sum(axis=0)
        # Re-seed starved components at a random data-adjacent point. The
        # monotone trace restarts with the re-seeded state (recorded below).
        if np.any(col < 1e-8) and restarts < 10:
            theta1 = g.theta1.copy()
            theta2 = g.theta2.copy()
            for j in np.nonzero(col < 1e-8)[0]:
                fresh = multistart_init(pair, data, 1, int(rng.integers(2**63)))
                theta1[j] = fresh.theta1[0]
                theta2[j] = fresh.theta2[0]
                restarts += 1
            g = MixingMeasure(theta1, theta2, g.weights)
            trace = []
            continue
        # Weight update with projection; never decrease the weight part.
        wbar = col / col.sum()
        cand = project_simplex_floor(wbar, config.weight_floor)
        old_w = g.weights
        q_w = lambda w: float(col @ np.log(np.maximum(w, 1e-300)))
        w_new = cand
        for _ in range(20):
            if q_w(w_new) >= q_w(old_w) - 1e-12:
                break
            w_new = 0.5 * (w_new + old_w)
        else:
            w_new = old_w
        theta1 = g.theta1.copy()
        theta2 = g.theta2.copy()
        for j in range(g.k):
            theta1[j], theta2[j] = _update_component(
                pair, xs, ys, resp[:, j], theta1[j], theta2[j]
            )
        g = MixingMeasure(theta1, theta2, w_new / w_new.sum())
        if len(trace) > 5:
            if abs(trace[-1] - trace[-6]) < config.loglik_tol * (abs(trace[-1]) + 1.0):
                converged = True
                break
    row, _ = _log_mixture(pair, g, xs, ys)
    trace.append(float(row.sum()))
    return g, np.array(trace), converged, restarts


def em_fit(pair: ExpertPair, data: Dataset, config: FitConfig) -> FitResult:
    """Best-of-n_starts EM fit; deterministic given config.seed."""
    if data.n < config.k:
        raise ValidationError("dataset smaller than the number of components")
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_starts)
    best = None
    traces = []
    for s, seq in enumerate(seeds):
        rng = np.random.default_rng(seq)
        init = multistart_init(pair, data, config.k, int(rng.integers(2**63)))
        g, trace, converged, restarts = _single_em(pair, data, config, init, rng)
        traces.append(trace)
        ll = float(trace[-1])
        if best is None or ll > best[0] + 0.0:
            best = (ll, s, g, trace, converged, restarts)
    ll, s, g, trace, converged, restarts = best
    return FitResult(
        g_hat=g,
        loglik=ll,
        iters=len(trace) - 1,
        converged=converged,
        loglik_trace=trace,
        restarts=restarts,
        start_index=s,
        all_traces=tuple(traces),
    )
