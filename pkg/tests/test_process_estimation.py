import math

import numpy as np
import pytest

from successor_lab.mrp import (
    FiniteMrp,
    StateDistribution,
    TransitionSample,
    sample_transition,
    stationary_distribution,
    successor_exact,
    tv_norm,
    value_exact,
)
from successor_lab.process_estimation import (
    DegenerateDenominatorError,
    ProcessEstimate,
    batch_estimate,
    estimate_from_observations,
    estimation_error_bounds,
    observe,
    rank_one_delta_m,
    rank_one_delta_v,
)

from conftest import philox, random_dense_mrp, uniform


def ring_with_self_loops(forward=(0.5, 0.4, 0.5, 0.8, 0.6, 0.5), gamma=0.7, rewards=None):
    """6-state chain: i -> i+1 w.p. p_i, stay w.p. 1 - p_i (12 edges).

    The stationary distribution has the closed form rho_i proportional to
    1/p_i (equal forward flow around the ring).
    """
    S = len(forward)
    P = np.zeros((S, S))
    for i, p in enumerate(forward):
        P[i, (i + 1) % S] = p
        P[i, i] = 1.0 - p
    R = np.linspace(-1.0, 1.0, S) if rewards is None else np.asarray(rewards)
    return FiniteMrp(S, P, R, np.full(S, 0.3), gamma)


class TestEstimateBasics:
    def test_fresh_invariants(self):
        est = ProcessEstimate.fresh(3, 0.8)
        assert est.inverse_residual() == 0.0
        np.testing.assert_array_equal(est.m_hat, np.eye(3))
        np.testing.assert_array_equal(est.p_hat, np.zeros((3, 3)))

    def test_first_observation_closed_form(self):
        est = ProcessEstimate.fresh(2, 0.8)
        observe(est, TransitionSample(0, 1, 0.0))
        np.testing.assert_array_equal(est.p_hat[0], [0.0, 1.0])
        # nilpotent P_hat: the inverse is Id + gamma * e0 e1^T exactly
        expected = np.eye(2)
        expected[0, 1] = 0.8
        np.testing.assert_allclose(est.m_hat, expected, atol=1e-14)
        direct = np.linalg.inv(np.eye(2) - 0.8 * est.p_hat)
        np.testing.assert_allclose(est.m_hat, direct, atol=1e-14)

    def test_repeated_deterministic_observation_is_constant(self):
        est = ProcessEstimate.fresh(2, 0.8)
        observe(est, TransitionSample(0, 1, 0.5))
        p_after_first = est.p_hat.copy()
        m_after_first = est.m_hat.copy()
        for _ in range(5):
            observe(est, TransitionSample(0, 1, 0.5))
        np.testing.assert_array_equal(est.p_hat, p_after_first)
        np.testing.assert_allclose(est.m_hat, m_after_first, atol=1e-13)

    def test_unvisited_rows_stay_unit(self):
        est = ProcessEstimate.fresh(3, 0.5)
        observe(est, TransitionSample(0, 1, 0.0))
        np.testing.assert_array_equal(est.p_hat[2], np.zeros(3))
        np.testing.assert_array_equal(est.m_hat[2], [0.0, 0.0, 1.0])

    def test_inverse_invariant_along_updates(self):
        env = random_dense_mrp(61, 4, 0.85)
        rho = uniform(4)
        rng = philox(61)
        est = ProcessEstimate.fresh(4, 0.85)
        worst = 0.0
        for _ in range(3000):
            observe(est, sample_transition(env, rho, rng))
            worst = max(worst, est.inverse_residual())
        assert worst < 1e-7
        assert est.resyncs == 0

    def test_terminal_observation_keeps_inverse(self):
        est = ProcessEstimate.fresh(2, 0.9)
        observe(est, TransitionSample(0, 1, 0.0))
        observe(est, TransitionSample(0, 0, 0.0, terminal=True))
        np.testing.assert_array_equal(est.p_hat[0], [0.0, 0.5])
        assert est.inverse_residual() < 1e-12

    def test_sequential_matches_tally(self):
        env = random_dense_mrp(62, 5, 0.8)
        rho = StateDistribution([0.3, 0.25, 0.2, 0.15, 0.1])
        rng = philox(62)
        samples = [sample_transition(env, rho, rng) for _ in range(2000)]
        est_seq = ProcessEstimate.fresh(5, 0.8)
        for t in samples:
            observe(est_seq, t)
        est_tally = estimate_from_observations(5, 0.8, samples)
        np.testing.assert_allclose(est_seq.p_hat, est_tally.p_hat, atol=1e-12)
        np.testing.assert_allclose(est_seq.r_hat, est_tally.r_hat, atol=1e-12)
        np.testing.assert_allclose(est_seq.m_hat, est_tally.m_hat, atol=1e-9)
        np.testing.assert_array_equal(est_seq.counts, est_tally.counts)

    def test_degenerate_denominator_flagged(self):
        est = ProcessEstimate.fresh(2, 0.9)
        est.counts[0] = 1
        # corrupted by hand so that gamma*M[s', s] - M[s, s] + 1 = n_s
        est.m_hat = np.array([[0.9, 0.0], [1.0, 1.0]])
        with pytest.raises(DegenerateDenominatorError):
            rank_one_delta_m(est, TransitionSample(0, 1, 0.0), n_s=1)


class TestDeltas:
    def test_delta_m_zero_on_consistent_deterministic_edge(self):
        est = ProcessEstimate.fresh(2, 0.8)
        for _ in range(50):
            observe(est, TransitionSample(0, 1, 0.0))
            observe(est, TransitionSample(1, 0, 0.0))
        delta = rank_one_delta_m(est, TransitionSample(0, 1, 0.0), n_s=int(est.counts[0]) + 1)
        assert np.abs(delta).max() < 1e-12

    def test_delta_v_reduces_to_scaled_td_at_identity(self):
        est = ProcessEstimate.fresh(3, 0.9)
        est.counts[1] = 4
        est.r_hat = np.array([0.0, 1.0, 2.0])
        t = TransitionSample(1, 2, 0.5)
        v = est.value()
        gap = 0.5 + 0.9 * v[2] - v[1]
        delta = rank_one_delta_v(est, t)
        expected = np.zeros(3)
        expected[1] = gap / 4
        np.testing.assert_allclose(delta, expected, atol=1e-14)

    def test_delta_v_zero_at_consistent_value(self):
        est = ProcessEstimate.fresh(2, 0.8)
        observe(est, TransitionSample(0, 1, 1.0))
        observe(est, TransitionSample(1, 0, -0.5))
        # noiseless rewards, edges already in P_hat with weight 1
        delta = rank_one_delta_v(est, TransitionSample(0, 1, 1.0), n_s=int(est.counts[0]) + 1)
        assert np.abs(delta).max() < 1e-12

    def _expected_summation_setup(self, t_total):
        env = random_dense_mrp(63, 4, 0.7)
        rho = np.array([0.4, 0.3, 0.2, 0.1])
        est = ProcessEstimate.fresh(4, 0.7)
        # a valid estimator state: some fully-observed empirical process
        other = random_dense_mrp(64, 4, 0.7)
        est.p_hat = other.transition.copy()
        est.r_hat = philox(65).normal(size=4)
        est.counts = (t_total * rho).astype(np.int64)
        assert est.counts.sum() == t_total
        est.resync()
        return env, rho, est

    def test_leading_term_of_expected_delta_m(self):
        # summing the denominator-free leading form over (s, s') ~ rho P
        # reproduces (1/t) M (Id + gamma P M - M) exactly when n_s = t rho_s
        t_total = 1000
        env, rho, est = self._expected_summation_setup(t_total)
        S, gamma, M = 4, est.discount, est.m_hat
        total = np.zeros((S, S))
        for s in range(S):
            for s2 in range(S):
                p = rho[s] * env.transition[s, s2]
                if p == 0:
                    continue
                row = gamma * M[s2] - M[s]
                row = row.copy()
                row[s] += 1.0
                total += p * np.outer(M[:, s], row) / est.counts[s]
        closed = M @ (np.eye(S) + gamma * env.transition @ M - M) / t_total
        np.testing.assert_allclose(total, closed, atol=1e-14)

    def test_full_delta_remainder_shrinks_superlinearly(self):
        results = {}
        for t_total in (100, 1000, 10_000):
            env, rho, est = self._expected_summation_setup(t_total)
            S, gamma, M = 4, est.discount, est.m_hat
            total_m = np.zeros((S, S))
            total_v = np.zeros(S)
            v_hat = est.value()
            for s in range(S):
                for s2 in range(S):
                    p = rho[s] * env.transition[s, s2]
                    if p == 0:
                        continue
                    sample = TransitionSample(s, s2, float(env.reward_mean[s]))
                    total_m += p * rank_one_delta_m(est, sample, n_s=int(est.counts[s]))
                    # the true value update, with the reward at its mean
                    delta_m = rank_one_delta_m(est, sample, n_s=int(est.counts[s]))
                    delta_r = np.zeros(S)
                    delta_r[s] = (env.reward_mean[s] - est.r_hat[s]) / est.counts[s]
                    total_v += p * (
                        (est.m_hat + delta_m) @ (est.r_hat + delta_r) - v_hat
                    )
            closed_m = M @ (np.eye(S) + gamma * env.transition @ M - M) / t_total
            closed_v = M @ (env.reward_mean + gamma * env.transition @ v_hat - v_hat) / t_total
            results[t_total] = (
                np.abs(total_m - closed_m).max(),
                np.abs(total_v - closed_v).max(),
            )
        for i in (0, 1):
            assert results[1000][i] * 1000 < results[100][i] * 100
            assert results[10_000][i] * 10_000 < results[1000][i] * 1000


class TestBounds:
    def test_quartering_t_halves_bounds(self):
        m1, v1 = estimation_error_bounds(6, 12, 0.7, 1.3, 1000, 0.05)
        m2, v2 = estimation_error_bounds(6, 12, 0.7, 1.3, 4000, 0.05)
        assert m2 == pytest.approx(m1 / 2)
        assert v2 == pytest.approx(v1 / 2)

    def test_plug_in_arithmetic(self):
        # independent arithmetic with the math module
        m, v = estimation_error_bounds(4, 4, 0.5, 1.0, 10_000, 0.05)
        want_m = 2 * 0.5 / 0.25 * math.sqrt(2 * 4 / 10_000 * math.log(2 / 0.05))
        want_v = 3 * 1.0 / 0.25 * math.sqrt(2 * 4 / 10_000 * math.log(4 * 4 / 0.05))
        assert m == pytest.approx(want_m, abs=1e-15)
        assert v == pytest.approx(want_v, abs=1e-15)

    def test_validation(self):
        with pytest.raises(ValueError):
            estimation_error_bounds(4, 4, 0.5, 1.0, 0, 0.05)
        with pytest.raises(ValueError):
            estimation_error_bounds(4, 4, 0.5, 1.0, 10, 1.5)

    def test_small_coverage_run(self):
        env = ring_with_self_loops()
        rho = stationary_distribution(env)
        m_star = successor_exact(env)
        v_star = value_exact(env)
        edges = int(np.count_nonzero(env.transition))
        r_max = float(np.max(np.abs(env.reward_mean) + env.reward_noise_std))
        t = 2000
        m_bound, v_bound = estimation_error_bounds(6, edges, env.discount, r_max, t, 0.05)
        hits = 0
        trials = 40
        for trial in range(trials):
            est = batch_estimate(env, rho, t, philox(1000 + trial))
            ok_m = tv_norm(est.m_hat, m_star, rho) <= m_bound
            ok_v = float(rho.weights @ np.abs(est.value() - v_star)) <= v_bound
            hits += ok_m and ok_v
        assert hits / trials >= 0.95
