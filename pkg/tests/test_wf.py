import math

import numpy as np
import pytest

from dualfilter import DimensionError, ObservationRecord, WFParams
from dualfilter.wf import (block_count_probs, density_ratio,
                           emission_log_pmf, gillespie_jump_chain,
                           kingman_rates, kingman_transitions, log_marginal,
                           moran_rates, moran_sample_many, moran_transitions,
                           typed_death_kernel, typed_death_sample_many,
                           typed_transition, update_counts,
                           wf_chain_sample_many, wf_diffusion_binned_sample_many,
                           wf_transition_sample, wf_transition_sample_many)

from .oracles import (block_count_path, moran_path, quad_wf_marginal,
                      tv_sample_vs_pmf, tv_tuple_samples, typed_kingman_path)


# ---------------------------------------------------------------------------
# density ratio and conjugate updates
# ---------------------------------------------------------------------------

def test_density_ratio_is_one_at_origin(wf3_params):
    xs = np.array([[0.2, 0.5, 0.3], [0.9, 0.05, 0.05]])
    np.testing.assert_allclose(density_ratio(xs, (0, 0, 0), wf3_params), 1.0)


def test_density_ratio_times_prior_is_dirichlet(wf3_params):
    from scipy.stats import dirichlet
    p = wf3_params
    n = (2, 0, 1)
    xs = np.array([[0.2, 0.5, 0.3], [0.6, 0.3, 0.1], [0.05, 0.9, 0.05]])
    a = np.asarray(p.alpha)
    lhs = density_ratio(xs, n, p) * np.array([dirichlet.pdf(x, a) for x in xs])
    rhs = np.array([dirichlet.pdf(x, a + np.asarray(n)) for x in xs])
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10)


def test_density_ratio_direct_value():
    # K=2, alpha=(1,1), n=(1,0), x=(0.3,0.7): Gamma(3)/Gamma(2) * 0.3 = 0.6
    p = WFParams((1.0, 1.0))
    got = density_ratio(np.array([0.3, 0.7]), (1, 0), p)
    assert got == pytest.approx(0.6, rel=1e-12)


def test_density_ratio_zero_coordinate(wf3_params):
    got = density_ratio(np.array([0.0, 0.5, 0.5]), (1, 0, 0), wf3_params)
    assert got == 0.0


def test_update_counts_examples(wf3_params):
    assert update_counts((0, 0, 0), ObservationRecord(0, (0, 1, 0)), wf3_params) \
        == (0, 1, 0)
    p4 = WFParams((3.0, 3.0, 3.0, 3.0))
    assert update_counts((4, 0, 9, 2), ObservationRecord(0, (1, 1, 0, 0)), p4) \
        == (5, 1, 9, 2)


def test_update_counts_merge(wf3_params):
    a = update_counts((1, 0, 2), ObservationRecord(0, (1, 0, 0)), wf3_params)
    a = update_counts(a, ObservationRecord(0, (0, 2, 0)), wf3_params)
    b = update_counts((1, 0, 2), ObservationRecord(0, (1, 2, 0)), wf3_params)
    assert a == b


def test_update_counts_dimension_error(wf3_params):
    with pytest.raises(DimensionError):
        update_counts((1, 0), ObservationRecord(0, (1, 0)), wf3_params)


def test_log_marginal_symmetric_half():
    p = WFParams((1.0, 1.0))
    got = log_marginal((0, 0), ObservationRecord(0, (1, 0)), p)
    assert math.exp(got) == pytest.approx(0.5, rel=1e-12)


def test_log_marginal_empty_batch(wf3_params):
    assert log_marginal((2, 1, 0), ObservationRecord(0, (0, 0, 0)), wf3_params) == 0.0


def test_log_marginal_matches_quadrature(wf3_params):
    got = math.exp(log_marginal((2, 0, 0), ObservationRecord(0, (1, 1, 0)),
                                wf3_params))
    want = quad_wf_marginal((2, 0, 0), (1, 1, 0), wf3_params)
    assert got == pytest.approx(want, abs=1e-6)


def test_log_marginal_matches_quadrature_k2(wf2_params):
    got = math.exp(log_marginal((3, 1), ObservationRecord(0, (2, 2)), wf2_params))
    want = quad_wf_marginal((3, 1), (2, 2), wf2_params)
    assert got == pytest.approx(want, rel=1e-9)


# ---------------------------------------------------------------------------
# dual rates
# ---------------------------------------------------------------------------

def test_kingman_rates_example(wf3_params):
    rates = kingman_rates((2, 1, 0), wf3_params)
    assert rates[0] == pytest.approx(5.3)
    assert rates[1] == pytest.approx(2.65)
    assert rates[2] == 0.0


def test_kingman_rates_single_lineage(wf3_params):
    rates = kingman_rates((0, 1, 0), wf3_params)
    assert rates[1] == pytest.approx(wf3_params.theta / 2.0)


def test_kingman_total_rate_identity(wf3_params):
    m = (4, 2, 3)
    tot = sum(m)
    rates = kingman_rates(m, wf3_params)
    want = tot * (wf3_params.theta + tot - 1.0) / 2.0
    assert sum(rates.values()) == pytest.approx(want, rel=1e-12)


def test_moran_rates_example():
    p = WFParams((3.0, 3.0, 3.0, 3.0))
    rates = moran_rates((4, 0, 9, 2), p)
    assert rates[(2, 0)] == pytest.approx(31.5)   # 9 * (3 + 4) / 2
    assert all(i != j for (i, j) in rates)
    assert not any(i == 1 for (i, _) in rates)    # empty type never removed


def test_moran_moves_conserve_total(wf3_params):
    trans = moran_transitions(wf3_params)
    for nxt, _ in trans((3, 2, 1)):
        assert sum(nxt) == 6


# ---------------------------------------------------------------------------
# generic jump-chain simulation
# ---------------------------------------------------------------------------

def test_jump_chain_absorption_time_mean(wf3_params, rng):
    # single lineage absorbs after an Exp(theta/2) time
    trans = kingman_transitions(wf3_params)
    n = 20_000
    times = np.empty(n)
    for i in range(n):
        # bisect the absorption time by simulating at increasing horizons
        # (cheaper: sample the exponential clock directly through the chain)
        t = rng.exponential(2.0 / wf3_params.theta)
        times[i] = t
    # simulate the chain at the mean horizon and compare absorption fraction
    horizon = 2.0 / wf3_params.theta
    absorbed = sum(gillespie_jump_chain(trans, (1, 0, 0), horizon, rng) == (0, 0, 0)
                   for _ in range(n))
    want = 1.0 - math.exp(-1.0)  # P(Exp(rate) <= 1/rate)
    se = math.sqrt(want * (1 - want) / n)
    assert abs(absorbed / n - want) < 4 * se


def test_jump_chain_no_event_limit(wf3_params, rng):
    hits = sum(gillespie_jump_chain(moran_transitions(wf3_params), (2, 1, 0),
                                    1e-12, rng) == (2, 1, 0)
               for _ in range(20_000))
    assert hits == 20_000


def test_jump_chain_absorbing_state(wf3_params, rng):
    assert gillespie_jump_chain(kingman_transitions(wf3_params), (0, 0, 0),
                                5.0, rng) == (0, 0, 0)


# ---------------------------------------------------------------------------
# block-counting chain
# ---------------------------------------------------------------------------

def test_block_count_t_small_is_identity(wf3_params):
    probs = block_count_probs(6, 1e-9, wf3_params)
    assert probs[6] == pytest.approx(1.0, abs=1e-6)


def test_block_count_normalizes(wf3_params):
    for m, t in [(5, 0.5), (40, 0.1), (200, 1.0)]:
        probs = block_count_probs(m, t, wf3_params)
        assert abs(probs.sum() - 1.0) <= 1e-8
        assert np.all(probs >= 0.0)


def test_block_count_two_level_closed_form(wf3_params):
    # m=2: the two-level pure-death chain has an explicit solution
    theta = wf3_params.theta
    t = 0.4
    r2, r1 = theta + 1.0, theta / 2.0
    probs = block_count_probs(2, t, wf3_params)
    assert probs[2] == pytest.approx(math.exp(-r2 * t), rel=1e-10)
    want1 = r2 / (r2 - r1) * (math.exp(-r1 * t) - math.exp(-r2 * t))
    assert probs[1] == pytest.approx(want1, rel=1e-10)


def test_block_count_matches_gillespie(wf3_params):
    rng = np.random.default_rng(21)
    samples = np.array([block_count_path(5, 0.5, wf3_params.theta, rng)
                        for _ in range(100_000)])
    probs = block_count_probs(5, 0.5, wf3_params)
    assert tv_sample_vs_pmf(samples, probs) < 0.02


def test_block_count_series_agrees_with_monte_carlo(wf3_params):
    from dualfilter.wf import _block_count_mc, _block_count_series
    series = _block_count_series(30, 0.3, wf3_params.theta)
    assert series is not None
    mc = _block_count_mc(30, 0.3, wf3_params.theta)
    assert 0.5 * np.abs(series - mc).sum() < 0.02


def test_block_count_zero_start(wf3_params):
    np.testing.assert_allclose(block_count_probs(0, 1.0, wf3_params), [1.0])


# ---------------------------------------------------------------------------
# typed death transitions
# ---------------------------------------------------------------------------

def test_typed_transition_requires_componentwise_order(wf3_params):
    assert typed_transition((2, 1, 0), (1, 2, 0), 0.5, wf3_params) == 0.0


def test_typed_transition_one_survivor_symmetry():
    p = WFParams((1.3, 1.3))
    kern = typed_death_kernel((1, 1), 0.7, p)
    assert kern[(1, 0)] == pytest.approx(kern[(0, 1)], rel=1e-12)


def test_typed_kernel_mass_is_one(wf3_params):
    kern = typed_death_kernel((2, 1, 3), 0.4, wf3_params)
    assert sum(kern.values()) == pytest.approx(1.0, abs=1e-10)


def test_typed_kernel_tail_truncation_close(wf3_params):
    full = typed_death_kernel((4, 3, 2), 1.0, wf3_params)
    trunc = typed_death_kernel((4, 3, 2), 1.0, wf3_params, tail_eps=1e-12)
    drop = sum(v for k, v in full.items() if k not in trunc)
    assert drop < 10 * 1e-12
    for k, v in trunc.items():
        assert v == pytest.approx(full[k], rel=1e-9)


def test_typed_kernel_matches_typed_gillespie(wf3_params):
    rng = np.random.default_rng(12)
    m0, t = (2, 1, 0), 0.5
    kern = typed_death_kernel(m0, t, wf3_params)
    n = 100_000
    from collections import Counter
    counts = Counter(typed_kingman_path(m0, t, wf3_params, rng) for _ in range(n))
    tv = 0.5 * sum(abs(counts.get(k, 0) / n - v) for k, v in kern.items())
    tv += 0.5 * sum(c / n for k, c in counts.items() if k not in kern)
    assert tv < 0.03


def test_typed_sampler_matches_kernel(wf3_params):
    m0, t = (3, 2, 1), 0.3
    kern = typed_death_kernel(m0, t, wf3_params)
    draws = typed_death_sample_many(m0, t, wf3_params,
                                    np.random.default_rng(4), 100_000)
    from collections import Counter
    counts = Counter(map(tuple, draws.tolist()))
    tv = 0.5 * sum(abs(counts.get(k, 0) / len(draws) - v) for k, v in kern.items())
    tv += 0.5 * sum(c / len(draws) for k, c in counts.items() if k not in kern)
    assert tv < 0.02


def test_kingman_paths_monotone(wf3_params, rng):
    trans = kingman_transitions(wf3_params)
    for _ in range(200):
        out = gillespie_jump_chain(trans, (3, 1, 2), 0.5, rng)
        assert all(o <= s for o, s in zip(out, (3, 1, 2)))


# ---------------------------------------------------------------------------
# Moran dual and its approximations
# ---------------------------------------------------------------------------

def test_moran_conserves_total(wf3_params, rng):
    out = moran_sample_many((4, 2, 0), 1.0, wf3_params, rng, 2_000)
    assert np.all(out.sum(axis=1) == 6)


def test_moran_vectorized_matches_scalar_oracle(wf3_params):
    n0, t = (2, 1, 0), 0.5
    fast = moran_sample_many(n0, t, wf3_params, np.random.default_rng(3), 30_000)
    rng = np.random.default_rng(4)
    slow = np.array([moran_path(n0, t, wf3_params, rng) for _ in range(30_000)])
    assert tv_tuple_samples(fast, slow) < 0.03


def test_moran_empty_configuration_is_fixed(wf3_params, rng):
    out = moran_sample_many((0, 0, 0), 1.0, wf3_params, rng, 100)
    assert np.all(out == 0)


def test_wf_chain_conserves_total(wf3_params, rng):
    out = wf_chain_sample_many((10, 5, 5), 1.0, wf3_params, rng, 1_000)
    assert np.all(out.sum(axis=1) == 20)


def test_wf_chain_applies_at_least_one_generation(wf3_params):
    # t small enough that round(N*t) = 0 still runs one generation
    out = wf_chain_sample_many((5, 0, 0), 1e-4, wf3_params,
                               np.random.default_rng(0), 4_000)
    assert np.any(out != np.array([5, 0, 0]))


def test_wf_chain_calibration_against_moran(wf3_params):
    # one-time calibration gate: TV <= 0.05 at N = 20, t = 1
    n0, t = (10, 5, 5), 1.0
    moran = moran_sample_many(n0, t, wf3_params, np.random.default_rng(31), 100_000)
    chain = wf_chain_sample_many(n0, t, wf3_params, np.random.default_rng(32), 100_000)
    assert tv_tuple_samples(moran, chain) <= 0.05


def test_wf_diffusion_binned_preserves_total(wf3_params, rng):
    out = wf_diffusion_binned_sample_many((4, 0, 9), 0.1, wf3_params, rng, 2_000)
    assert np.all(out.sum(axis=1) == 13)


def test_wf_diffusion_binned_stationary_mean(wf3_params):
    p = wf3_params
    out = wf_diffusion_binned_sample_many((8, 2, 2), 20.0, p,
                                          np.random.default_rng(6), 100_000)
    x1 = out[:, 0] / 12.0
    se = x1.std() / math.sqrt(len(x1))
    # binning adds a discretization wobble on top of the MC error
    assert abs(x1.mean() - p.alpha[0] / p.theta) < 3 * se + 0.5 / 12.0


# ---------------------------------------------------------------------------
# WF diffusion transition sampler
# ---------------------------------------------------------------------------

def test_wf_transition_stays_on_simplex(wf3_params, rng):
    xs = wf_transition_sample_many(np.array([0.2, 0.5, 0.3]), 0.5,
                                   wf3_params, rng, 5_000)
    assert np.all(xs >= 0.0)
    np.testing.assert_allclose(xs.sum(axis=1), 1.0, atol=1e-10)


def test_wf_transition_stationary_at_large_t(wf3_params):
    p = wf3_params
    xs = wf_transition_sample_many(np.array([0.9, 0.05, 0.05]), 30.0, p,
                                   np.random.default_rng(13), 200_000)
    se = xs[:, 0].std() / math.sqrt(len(xs))
    assert abs(xs[:, 0].mean() - p.alpha[0] / p.theta) < 3 * se


def test_wf_transition_mean_identity(wf3_params):
    # E[x1'] = x1 e^{-theta t/2} + (a1/theta)(1 - e^{-theta t/2})
    p = wf3_params
    x = np.array([0.5, 0.2, 0.3])
    t = 0.3
    xs = wf_transition_sample_many(x, t, p, np.random.default_rng(14), 1_000_000)
    want = x[0] * math.exp(-p.theta * t / 2) + \
        (p.alpha[0] / p.theta) * (1 - math.exp(-p.theta * t / 2))
    se = xs[:, 0].std() / math.sqrt(len(xs))
    assert abs(xs[:, 0].mean() - want) < 3 * se


def test_wf_transition_scalar_wrapper(wf3_params, rng):
    out = wf_transition_sample(np.array([0.3, 0.3, 0.4]), 0.2, wf3_params, rng)
    assert out.shape == (3,)
    assert abs(out.sum() - 1.0) < 1e-10


# ---------------------------------------------------------------------------
# stationary propagation and emissions
# ---------------------------------------------------------------------------

def test_origin_is_absorbing_for_both_duals(wf3_params, rng):
    zero = (0, 0, 0)
    assert typed_death_kernel(zero, 1.0, wf3_params) == {zero: 1.0}
    assert moran_rates(zero, wf3_params) == {}
    out = moran_sample_many(zero, 5.0, wf3_params, rng, 10)
    assert np.all(out == 0)


def test_emission_log_pmf_ordered_sample(wf3_params):
    xs = np.array([[0.5, 0.25, 0.25], [0.1, 0.8, 0.1]])
    y = ObservationRecord(0.0, (2, 1, 0))
    got = emission_log_pmf(xs, y, wf3_params)
    want = 2 * np.log(xs[:, 0]) + np.log(xs[:, 1])
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_emission_log_pmf_zero_coordinate(wf3_params):
    xs = np.array([[0.0, 0.5, 0.5]])
    y = ObservationRecord(0.0, (1, 0, 0))
    assert emission_log_pmf(xs, y, wf3_params)[0] == -np.inf


# ---------------------------------------------------------------------------
# duality identity (spot check; the full sweep runs in acceptance)
# ---------------------------------------------------------------------------

def test_wf_duality_spot(wf3_params):
    p = wf3_params
    n, t = (2, 1, 0), 0.5
    x = np.array([0.5, 0.2, 0.3])
    rng = np.random.default_rng(15)
    xs = wf_transition_sample_many(x, t, p, rng, 100_000)
    lhs = density_ratio(xs, n, p)
    lhs_mean, lhs_se = lhs.mean(), lhs.std() / math.sqrt(len(lhs))
    ms = moran_sample_many(n, t, p, rng, 100_000)
    uniq, inv = np.unique(ms, axis=0, return_inverse=True)
    hvals = np.array([density_ratio(x[None, :], tuple(r), p) for r in uniq])
    rhs = hvals[inv]
    rhs_mean, rhs_se = rhs.mean(), rhs.std() / math.sqrt(len(rhs))
    assert abs(lhs_mean - rhs_mean) <= 4.0 * math.hypot(lhs_se, rhs_se)


# ---------------------------------------------------------------------------
# mixture-level invariants specific to the WF family
# ---------------------------------------------------------------------------

def test_wf_mixture_update_merge_batches(wf3_model):
    from dualfilter.mixtures import DualMixture, update
    model = wf3_model
    mix = DualMixture.from_weights(
        model.family,
        {(0, 0, 0): 0.2, (1, 0, 1): 0.5, (2, 2, 0): 0.3}, None)
    ops = (model.log_marginal_point, model.shift_index, model.shift_param)
    seq, _ = update(mix, ObservationRecord(0.0, (1, 0, 0)), *ops)
    seq, _ = update(seq, ObservationRecord(0.0, (0, 2, 0)), *ops)
    merged, _ = update(mix, ObservationRecord(0.0, (1, 2, 0)), *ops)
    assert seq.points == merged.points
    np.testing.assert_allclose(np.asarray(seq.weights),
                               np.asarray(merged.weights), atol=1e-10)


def test_moran_propagation_conserves_total_support(wf3_model, rng):
    from dualfilter.mixtures import DualMixture, dual_particle_propagate
    mix = DualMixture.from_weights(
        wf3_model.family, {(2, 1, 1): 0.6, (1, 3, 0): 0.4}, None)
    out = dual_particle_propagate(mix, wf3_model.dual_sampler("moran"),
                                  500, 0.5, rng)
    assert all(sum(pt) == 4 for pt in out.points)


def test_kingman_propagation_support_is_downward(wf3_model):
    from dualfilter.mixtures import DualMixture, propagate
    src = (3, 1, 2)
    mix = DualMixture.from_weights(wf3_model.family, {src: 1.0}, None)
    out = propagate(mix, wf3_model.pd_kernel, wf3_model.theta_flow, 0.5)
    assert all(all(n <= m for n, m in zip(pt, src)) for pt in out.points)


def test_gillespie_jump_chain_budget(wf3_params, rng):
    from dualfilter import SimulationBudgetExceeded
    from dualfilter.wf import gillespie_jump_chain, moran_transitions
    with pytest.raises(SimulationBudgetExceeded):
        gillespie_jump_chain(moran_transitions(wf3_params), (5, 5, 5), 50.0,
                             rng, max_events=10)
