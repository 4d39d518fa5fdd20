"""End-to-end acceptance gate.

Each test_criterion_* pins its tolerances inline; the conftest terminal hook
prints one PASS/FAIL line per criterion. Heavy experiment runs are memoized so
criteria sharing a run (6/7/8) time and reuse a single execution.
"""

import itertools
import time
from functools import lru_cache

import numpy as np

from helpers import cached_rbar, fd_partial, transport_bruteforce
from moe_rates import (
    FAMILY_IDS,
    FitConfig,
    MixingMeasure,
    density_theta_partial,
    em_fit,
    expert_pair,
    gaussian_h1_derivative,
    sample,
    uniform_prior,
)
from moe_rates.algebra import independence_check, p_polynomials, rtilde_bracket
from moe_rates.divergence import QuadratureSpec, ratio_profile
from moe_rates.experiments import (
    generic_split_sequence,
    get_scenario,
    run_rate_experiment,
    run_witness_experiment,
    witness_cancellation_sums,
    witness_sequence,
)
from moe_rates.transport import (
    KappaVector,
    atom_match_report,
    d_kappa_pow,
    kappa,
    wasserstein_kappa,
)


def _gaussian(y, h1, h2sq):
    return np.exp(-0.5 * (y - h1) ** 2 / h2sq) / np.sqrt(2 * np.pi * h2sq)


@lru_cache(maxsize=None)
def _rate_run(name):
    t0 = time.monotonic()
    report = run_rate_experiment(get_scenario(name), threads=1)
    return report, time.monotonic() - t0


def test_criterion_01_transport_oracle_equivalence():
    """wasserstein_kappa == brute-force polytope vertex enumeration (1e-9)
    on 200 random instances up to 4x4 atoms, in under 10 s."""
    rng = np.random.default_rng(11)
    t0 = time.monotonic()
    for _ in range(200):
        m, n = (int(v) for v in rng.integers(1, 5, 2))
        kap = KappaVector(tuple(int(v) for v in rng.integers(1, 5, 3)))
        g = MixingMeasure(
            rng.uniform(-2, 2, (m, 2)), rng.uniform(0.2, 2.0, (m, 1)), _weights(rng, m)
        )
        g0 = MixingMeasure(
            rng.uniform(-2, 2, (n, 2)), rng.uniform(0.2, 2.0, (n, 1)), _weights(rng, n)
        )
        value, _ = wasserstein_kappa(kap, g, g0)
        cost = d_kappa_pow(kap, g.atom_matrix(), g0.atom_matrix())
        expect = transport_bruteforce(cost, g.weights, g0.weights)
        assert abs(value**kap.max_order - expect) < 1e-9
    assert time.monotonic() - t0 < 10.0


def _weights(rng, k):
    w = rng.uniform(0.1, 1.0, k)
    return w / w.sum()


def _orders_up_to(q1, q2, total):
    for alpha in itertools.product(range(total + 1), repeat=q1):
        for beta in itertools.product(range(total + 1), repeat=q2):
            if 1 <= sum(alpha) + sum(beta) <= total:
                yield alpha, beta


def test_criterion_02_derivative_correctness():
    """density_theta_partial and the squared-mean structure-polynomial
    expansion match central finite differences (rel err < 1e-4, floor 1e-5
    against cancellation noise) at 20 random points per family and order
    combination up to total order 4, in under 30 s. Partials at these points
    have natural scale 0.1..10, so a 5e-6 absolute tolerance backs the
    relative one: order-4 stencils cannot resolve a relative error on values
    ~1e-6 produced purely by cancellation."""
    t0 = time.monotonic()
    for family in FAMILY_IDS:
        pair = expert_pair(family)
        rng = np.random.default_rng(23)
        a, b = pair.default_support
        for alpha, beta in _orders_up_to(pair.q1, pair.q2, 4):
            for _ in range(20):
                x = rng.uniform(a, b)
                t1 = rng.uniform(0.4, 1.4, pair.q1)
                t2 = rng.uniform(0.5, 1.5, pair.q2)
                y = pair.h1(x, t1) + rng.uniform(-1.5, 1.5)
                an = density_theta_partial(pair, t1, t2, x, y, alpha, beta)

                def func(t):
                    return _gaussian(
                        y, pair.h1(x, t[: pair.q1]), pair.h2sq(x, t[pair.q1 :])
                    )

                p = np.concatenate([t1, t2])
                # second Richardson level: 6th-order extrapolation kills the
                # truncation error on high-curvature order-4 partials
                fd = (
                    16.0 * fd_partial(func, p, alpha + beta, h=0.01)
                    - fd_partial(func, p, alpha + beta, h=0.02)
                ) / 15.0
                assert abs(an - fd) < 1e-4 * max(abs(an), abs(fd)) + 5e-6, (
                    family,
                    alpha,
                    beta,
                )
    # structure-polynomial expansion for the squared mean h1 = theta^2
    table = p_polynomials(4)
    rng = np.random.default_rng(29)
    for gamma1 in range(1, 5):
        base = (gamma1 + 1) // 2
        for _ in range(20):
            t = rng.uniform(0.5, 1.5)
            h2sq = rng.uniform(0.5, 1.5)
            y = t * t + rng.uniform(-1.5, 1.5)
            an = sum(
                table.eval(gamma1, u, t)
                * gaussian_h1_derivative(base + u, y, t * t, h2sq)
                for u in table.u_range(gamma1)
            )
            func = lambda p: _gaussian(y, p[0] ** 2, h2sq)
            fd = (
                16.0 * fd_partial(func, [t], (gamma1,), h=0.01)
                - fd_partial(func, [t], (gamma1,), h=0.02)
            ) / 15.0
            assert abs(an - fd) < 1e-4 * max(abs(an), abs(fd)) + 5e-6, gamma1
    assert time.monotonic() - t0 < 30.0


def test_criterion_03_gaussian_pde_residual():
    """|d^2 f / dh1^2 - 2 df/dh2sq| < 1e-10 at 100 random points, with the
    variance derivative from an exact complex-step oracle."""
    rng = np.random.default_rng(31)
    step = 1e-20
    for _ in range(100):
        y = rng.uniform(-3, 3)
        h1 = rng.uniform(-2, 2)
        h2sq = rng.uniform(0.2, 3.0)
        lhs = gaussian_h1_derivative(2, y, h1, h2sq)
        dvar = (
            np.exp(-0.5 * (y - h1) ** 2 / (h2sq + 1j * step))
            / np.sqrt(2 * np.pi * (h2sq + 1j * step))
        ).imag / step
        assert abs(lhs - 2.0 * dvar) < 1e-10


def test_criterion_04_independence_verdicts():
    """Catalog classification: SLOPE_CONST, POWM_LINX independent; LIN_CONST,
    LIN_X2, LIN_OFFSET, and QUAD_CONST with zero slope coordinate dependent
    with witness residual < 1e-8. Under 5 s."""
    t0 = time.monotonic()
    cases = [
        ("SLOPE_CONST", [0.8], [0.5], True),
        ("POWM_LINX", [0.4, 0.7], [0.6], True),
        ("QUAD_CONST", [0.7, 0.5], [0.5], True),
        ("LIN_CONST", [0.3, 0.8], [0.5], False),
        ("LIN_X2", [0.3, 0.8], [0.6], False),
        ("LIN_OFFSET", [0.3, 0.8], [0.5, 0.4], False),
        ("QUAD_CONST", [0.7, 0.0], [0.5], False),
    ]
    for family, t1, t2, expect_indep in cases:
        verdict = independence_check(expert_pair(family), t1, t2)
        assert verdict.independent == expect_indep, family
        if not expect_indep:
            assert verdict.witness_residual < 1e-8, family
    assert time.monotonic() - t0 < 5.0


def test_criterion_05_rbar_and_rtilde():
    """Search-derived rbar(2) = 4 and rbar(3) = 6 with solvability
    certificates below and a residual floor at the verdict, and rtilde
    brackets inside [3, rbar(s)] for theta in {0.5, 1, 2}, s in {2, 3}.
    Under 5 min."""
    t0 = time.monotonic()
    expected = {2: 4, 3: 6}
    for s, value in expected.items():
        res = cached_rbar(s)
        assert res.value == value
        for r in range(1, value):
            assert r in res.certificates
            assert res.best_residuals[r] < 1e-10
        # residual floor at the verdict order: measured 6.6e-5 (s=2, r=4) and
        # 5.5e-7 (s=3, r=6), both decades above the 1e-10 certificate bar
        assert res.best_residuals[value] > 1e-8
    for s in (2, 3):
        for theta in (0.5, 1.0, 2.0):
            br = rtilde_bracket(theta, s, n_starts=30, seed=0, rbar_result=cached_rbar(s))
            assert 3 <= br["lower"] <= br["upper"] <= expected[s]
    assert time.monotonic() - t0 < 300.0


def test_criterion_06_independent_expert_rate_slope():
    """THM32_INDEP log-log slope of median transport error in [-0.40, -0.15]
    (target -0.25), full 6-point grid x 20 replicates in under 20 min."""
    report, elapsed = _rate_run("THM32_INDEP")
    assert -0.40 <= report.slope <= -0.15
    assert report.excluded == 0
    assert elapsed < 1200.0


def test_criterion_07_hellinger_rate_slope():
    """Median Hellinger slope in [-0.65, -0.35] (target -0.5) on the same
    runs as criterion 6."""
    report, _ = _rate_run("THM32_INDEP")
    assert -0.65 <= report.h_slope <= -0.35


def test_criterion_08_dependent_expert_rate_ordering():
    """At n = 16000 the dependent-expert scenario's median transport error
    exceeds the independent one's, and its second mean coordinate (order-2
    penalty) decays with a steeper fitted slope than the first (order-4
    penalty). Ordering only, no absolute tolerance."""
    r42, _ = _rate_run("THM42_LINCONST")
    r32, _ = _rate_run("THM32_INDEP")
    assert r42.w_median[-1] > r32.w_median[-1]
    assert r42.coord_slopes[1] < r42.coord_slopes[0]


def test_criterion_09_witness_sequences():
    """Cancellation identities hold to 1e-10, every construction kind flags
    MONOTONE_DECREASING under a strictly smaller order vector, and the same
    family under the scenario's own order vector stays bounded below
    (min > 0.1 max over the grid). Under 10 min."""
    t0 = time.monotonic()
    cert = tuple(np.asarray(v) for v in cached_rbar(2).certificates[3])
    cases = [
        ("THM32_INDEP", "SPLIT_SYMMETRIC", kappa(1, 1), None),
        ("THM42_LINCONST", "COORD_SPLIT", kappa(1, 1, 1), None),
        ("THM42_LINCONST", "POLYSOL", kappa(1, 1, 1), cert),
    ]
    quad = QuadratureSpec(nx=48, ny=300)
    n_grid = (4, 8, 16, 32, 64)
    for name, kind, kprime, certificate in cases:
        sc = get_scenario(name)
        for n in n_grid:
            g_n = witness_sequence(kind, n, sc.g0, certificate)
            sums = witness_cancellation_sums(
                kind, g_n, sc.g0, max_order=3 if kind == "POLYSOL" else None
            )
            assert np.max(np.abs(sums)) < 1e-10, (name, kind, n)
        out = run_witness_experiment(
            sc, kind, kprime, n_grid=n_grid, certificate=certificate, quad=quad
        )
        assert "MONOTONE_DECREASING" in out["flags"], (name, kind)
        # bounded-below probe: same family under the scenario's own kappa
        seq = [generic_split_sequence(kind, n, sc.g0, certificate) for n in n_grid]
        profile = ratio_profile(sc.pair, sc.prior, seq, sc.g0, sc.kappa, quad)
        ratios = [e["ratio"] for e in profile if not e["excluded"]]
        assert min(ratios) > 0.1 * max(ratios), (name, kind)
    assert time.monotonic() - t0 < 600.0


def test_criterion_10_em_contract_and_consistency():
    """Monotone log-likelihood on every recorded trace (slack 1e-9) and
    exact-fitted recovery: 2-atom truth with separation 2, n = 10^4,
    20 starts, 20 replicate datasets; the transport objective
    W^{max order} = W^2 < 0.1 and every matched-atom coordinate error < 0.1
    in at least 18/20 (the raw distance W carries an irreducible
    sqrt(4 |weight error|) term with weight error ~ N(0, 0.25/n), so the 0.1
    threshold binds on the objective scale)."""
    pair = expert_pair("LIN_CONST")
    prior = uniform_prior(0.0, 1.0)
    g0 = MixingMeasure([[0.0, 1.0], [2.0, 1.0]], [[0.3], [0.3]], [0.5, 0.5])
    kap = kappa(2, 2, 2)
    hits = 0
    for rep in range(20):
        data = sample(pair, prior, g0, 10_000, 500 + rep)
        fit = em_fit(pair, data, FitConfig(k=2, n_starts=20, seed=rep))
        for trace in fit.all_traces:
            assert np.all(np.diff(trace) >= -1e-9)
        w, _ = wasserstein_kappa(kap, fit.g_hat, g0)
        coord = max(
            max(row["coord_errors"]) for row in atom_match_report(kap, fit.g_hat, g0)
        )
        if w**kap.max_order < 0.1 and coord < 0.1:
            hits += 1
    assert hits >= 18
