import numpy as np
import pytest
from dataclasses import replace

from helpers import cached_rbar
from moe_rates import (
    FitConfig,
    MixingMeasure,
    Scenario,
    ValidationError,
    builtin_scenarios,
    expert_pair,
    get_scenario,
    run_rate_experiment,
    run_witness_experiment,
    uniform_prior,
    witness_cancellation_sums,
    witness_sequence,
)
from moe_rates.experiments import generic_split_sequence, resolve_threads
from moe_rates.transport import KappaVector


EXPECTED_KAPPA = {
    "THM32_INDEP": (2, 2),
    "THM42_LINCONST": (4, 2, 2),
    "THM43_LINX2": (2, 4, 2),
    "THM44_OFFSET": (4, 4, 2, 2),
    "THM46_NONLIN_I": (2, 2, 2),
    "THM48_NONLIN_II": (3, 2, 2),
}


def test_builtin_scenario_kappa_table():
    scenarios = {sc.name: sc for sc in builtin_scenarios()}
    assert set(scenarios) == set(EXPECTED_KAPPA)
    for name, kap in EXPECTED_KAPPA.items():
        assert scenarios[name].kappa.orders == kap
        assert scenarios[name].fit_k >= scenarios[name].g0.k
        scenarios[name].g0.validate_domain(scenarios[name].pair)
    assert scenarios["THM48_NONLIN_II"].kappa_alt.orders == (4, 2, 2)


def test_get_scenario_unknown():
    with pytest.raises(ValidationError):
        get_scenario("NOPE")


def test_scenario_validation():
    pair = expert_pair("LIN_CONST")
    g0 = MixingMeasure([[0.0, 1.0], [1.0, 0.0]], [[0.5], [0.5]], [0.5, 0.5])
    with pytest.raises(ValidationError):
        Scenario("bad", pair, uniform_prior(0, 1), g0, fit_k=1, kappa=KappaVector((2, 2, 2)))
    with pytest.raises(ValidationError):
        Scenario(
            "bad", pair, uniform_prior(0, 1), g0, fit_k=2,
            kappa=KappaVector((2, 2, 2)), n_grid=(100, 100),
        )


def test_resolve_threads(monkeypatch):
    assert resolve_threads(3) == 3
    monkeypatch.setenv("MOE_RATES_THREADS", "2")
    assert resolve_threads(None) == 2
    monkeypatch.delenv("MOE_RATES_THREADS")
    assert resolve_threads(None) >= 1


def test_split_witness_cancellations_and_structure():
    sc = get_scenario("THM42_LINCONST")
    for kind in ("SPLIT_SYMMETRIC", "COORD_SPLIT"):
        g_n = witness_sequence(kind, 8, sc.g0)
        assert abs(g_n.weights.sum() - 1.0) < 1e-12
        assert g_n.k == sc.g0.k + 1
        sums = witness_cancellation_sums(kind, g_n, sc.g0)
        assert np.max(np.abs(sums)) < 1e-10
    # COORD_SPLIT only moves the second theta1 coordinate
    g_n = witness_sequence("COORD_SPLIT", 8, sc.g0)
    d = g_n.theta1[:2] - sc.g0.theta1[0]
    assert np.allclose(d[:, 0], 0.0) and np.allclose(np.abs(d[:, 1]), 1.0 / 8)


def test_polysol_witness_cancels_up_to_rbar_minus_one():
    sc = get_scenario("THM42_LINCONST")
    rb = cached_rbar(2)
    cert = rb.certificates[rb.value - 1]
    g_n = witness_sequence("POLYSOL", 16, sc.g0, certificate=cert)
    sums = witness_cancellation_sums("POLYSOL", g_n, sc.g0, max_order=rb.value - 1)
    assert np.max(np.abs(sums)) < 1e-10
    assert abs(g_n.weights.sum() - 1.0) < 1e-12


def test_witness_sequence_validation():
    sc = get_scenario("THM42_LINCONST")
    with pytest.raises(ValidationError):
        witness_sequence("SPLIT_SYMMETRIC", 1, sc.g0)
    with pytest.raises(ValidationError):
        witness_sequence("POLYSOL", 8, sc.g0)  # missing certificate
    with pytest.raises(ValidationError):
        witness_sequence("NOPE", 8, sc.g0)
    with pytest.raises(ValidationError):
        witness_sequence("COORD_SPLIT", 8, get_scenario("THM32_INDEP").g0)


def test_generic_split_alias():
    sc = get_scenario("THM42_LINCONST")
    a = witness_sequence("SPLIT_SYMMETRIC", 8, sc.g0)
    b = generic_split_sequence("SPLIT_SYMMETRIC", 8, sc.g0)
    assert np.array_equal(a.theta1, b.theta1) and np.array_equal(a.weights, b.weights)


def test_run_witness_experiment_validates_kappa_prime():
    sc = get_scenario("THM32_INDEP")
    with pytest.raises(ValidationError):
        run_witness_experiment(sc, "SPLIT_SYMMETRIC", KappaVector((2, 2)))  # not strict
    with pytest.raises(ValidationError):
        run_witness_experiment(sc, "SPLIT_SYMMETRIC", KappaVector((3, 1)))  # above kappa
    with pytest.raises(ValidationError):
        run_witness_experiment(sc, "SPLIT_SYMMETRIC", KappaVector((1, 1, 1)))  # length


def _tiny_scenario(seed=20260823):
    base = get_scenario("THM32_INDEP")
    return replace(
        base,
        n_grid=(200, 400),
        replicates=2,
        seed=seed,
        fit=FitConfig(k=2, n_starts=3, max_iters=80, seed=seed),
    )


def test_rate_experiment_bit_reproducible_across_thread_counts():
    sc = _tiny_scenario()
    r1 = run_rate_experiment(sc, threads=1)
    r2 = run_rate_experiment(sc, threads=3)
    assert r1.w_median == r2.w_median
    assert r1.h_median == r2.h_median
    assert r1.slope == r2.slope
    assert r1.coord_medians == r2.coord_medians
    assert [row["w_kappa"] for row in r1.raw_rows] == [row["w_kappa"] for row in r2.raw_rows]
    assert r1.estimator == "em-mle"
    assert r1.excluded == 0 and not r1.single_n_flag


def test_rate_experiment_single_n_flag():
    sc = replace(_tiny_scenario(), n_grid=(200,))
    rep = run_rate_experiment(sc, threads=1)
    assert rep.single_n_flag
    assert rep.slope is None and rep.h_slope is None and rep.coord_slopes is None


def test_rate_experiment_seed_changes_results():
    r1 = run_rate_experiment(_tiny_scenario(seed=1), threads=1)
    r2 = run_rate_experiment(_tiny_scenario(seed=2), threads=1)
    assert r1.w_median != r2.w_median
