import numpy as np
import pytest

from successor_lab.lowrank import (
    FbModel,
    FbVariant,
    NotAFixedPointError,
    OnlineFbStats,
    classify_fixed_point,
    fb_delta_exact,
    fb_delta_sampled,
    fb_fixed_point,
    fb_newton_delta_exact,
    fb_newton_step_sampled,
    fb_td_step,
    fb_td_step_exact,
    fb_value_exact,
    fb_vs_newton_flow,
    load_fb_checkpoint,
    newton_cross_stat,
    reward_embedding_stream,
    save_fb_checkpoint,
    truncated_svd_oracle,
)
from successor_lab.mrp import (
    FiniteMrp,
    StateDistribution,
    TransitionSample,
    laplacian,
    sample_transition,
    stationary_distribution,
    successor_exact,
)
from successor_lab.newton import newton_step

from conftest import philox, random_dense_mrp, uniform


def sym_path(n, gamma):
    """Symmetric lazy walk on a path: doubly stochastic, P = P^T."""
    P = np.zeros((n, n))
    for i in range(n):
        if i > 0:
            P[i, i - 1] = 0.5
        if i < n - 1:
            P[i, i + 1] = 0.5
    P[0, 0] = 0.5
    P[n - 1, n - 1] = 0.5
    return FiniteMrp(n, P, np.zeros(n), np.zeros(n), gamma)


def random_model(seed, rank, mrp, rho=None):
    rng = philox(seed)
    rho = rho if rho is not None else uniform(mrp.num_states)
    init = rng.normal(0.0, 1.0 / np.sqrt(rank), size=(2, rank, mrp.num_states))
    return FbModel(init[0], init[1], rho)


class TestVariants:
    def test_parse_codes(self):
        assert FbVariant.parse("fb").f_rule == "forward"
        assert FbVariant.parse("fb").b_rule == "backward"
        assert FbVariant.parse("bf").code == "bf"
        with pytest.raises(ValueError):
            FbVariant.parse("fx")

    def test_model_shapes(self):
        with pytest.raises(ValueError):
            FbModel(np.zeros((2, 3)), np.zeros((2, 4)), uniform(3))
        with pytest.raises(ValueError):
            FbModel(np.zeros((0, 3)), np.zeros((0, 3)), uniform(3))


class TestExactFixedPoints:
    def test_hand_built_ff_fixed_point(self):
        # symmetric chain, uniform rho: F = Id, B = S * M* solves both
        # forward fixed-point equations exactly
        env = sym_path(4, 0.8)
        rho = uniform(4)
        model = FbModel(np.eye(4), 4.0 * successor_exact(env), rho)
        d_f, d_b = fb_delta_exact(model, env, FbVariant.parse("ff"))
        assert np.abs(d_f).max() < 1e-10
        assert np.abs(d_b).max() < 1e-10

    def test_full_rank_fb_flow_reaches_truth(self):
        env = sym_path(4, 0.8)
        model = FbModel(np.eye(4), np.eye(4), uniform(4))
        model, converged, _ = fb_fixed_point(model, env, FbVariant.parse("fb"), eta=1.0)
        assert converged
        assert np.abs(model.operator() - successor_exact(env)).max() < 1e-4

    def test_bf_with_frozen_rank_one_f_reaches_weak_inverse(self):
        env = random_dense_mrp(111, 5, 0.8)
        rho = stationary_distribution(env)
        model = FbModel(philox(111).normal(size=(1, 5)), np.zeros((1, 5)), rho)
        model, converged, _ = fb_fixed_point(
            model, env, FbVariant.parse("bf"), eta=1.0, tol=1e-12, freeze=("f",)
        )
        assert converged
        report = classify_fixed_point(model, env, FbVariant.parse("bf"))
        assert report.weak_inverse < 1e-8


class TestSampledUpdates:
    def exact_stats(self, model, mrp):
        rho_hat = model.rho.diag()
        delta = laplacian(mrp)
        F, B = model.f, model.b
        return {
            "sigma_b": B @ rho_hat @ B.T,
            "sigma_f": F @ rho_hat @ F.T,
            "d_f": -F @ rho_hat @ delta @ F.T,
            "d_b": -B @ delta.T @ rho_hat @ B.T,
        }

    @pytest.mark.parametrize("code", ["ff", "fb", "bf", "bb"])
    def test_sampled_with_exact_stats_is_unbiased(self, code):
        env = random_dense_mrp(112, 4, 0.7)
        rho = StateDistribution([0.4, 0.3, 0.2, 0.1])
        model = random_model(112, 2, env, rho)
        variant = FbVariant.parse(code)
        stats = self.exact_stats(model, env)
        total_f = np.zeros_like(model.f)
        total_b = np.zeros_like(model.b)
        for s in range(4):
            for s2 in range(4):
                p = rho.weights[s] * env.transition[s, s2]
                if p == 0:
                    continue
                d_f, d_b = fb_delta_sampled(
                    model, variant, TransitionSample(s, s2, 0.0), 0.7, **stats
                )
                total_f += p * d_f
                total_b += p * d_b
        want_f, want_b = fb_delta_exact(model, env, variant)
        np.testing.assert_allclose(total_f, want_f, atol=1e-12)
        np.testing.assert_allclose(total_b, want_b, atol=1e-12)

    def test_moving_average_stats_approach_exact(self):
        env = random_dense_mrp(113, 4, 0.8)
        rho = stationary_distribution(env)
        model = random_model(113, 2, env, rho)
        stats = OnlineFbStats(rank=2, decay=0.995, warmup=100)
        rng = philox(113)
        for _ in range(4000):
            stats.update(model, sample_transition(env, rho, rng), 0.8)
        exact = self.exact_stats(model, env)
        for name in ("sigma_b", "sigma_f", "d_f", "d_b"):
            got = getattr(stats, name)
            scale = max(np.abs(exact[name]).max(), 0.1)
            assert np.abs(got - exact[name]).max() < 0.2 * scale, name

    def test_fb_td_step_moves_model(self):
        env = random_dense_mrp(114, 3, 0.8)
        model = random_model(114, 2, env)
        stats = OnlineFbStats(rank=2)
        stepped = fb_td_step(
            model, FbVariant.parse("fb"), TransitionSample(0, 1, 0.0), 0.8, 0.1, stats
        )
        assert stats.count == 1
        assert np.abs(stepped.f - model.f).max() > 0


class TestNewtonFactorUpdates:
    def test_zero_factors_stay_zero(self):
        env = random_dense_mrp(115, 3, 0.8)
        model = FbModel(np.zeros((1, 3)), np.zeros((1, 3)), uniform(3))
        d_f, d_b = fb_newton_delta_exact(model, env)
        np.testing.assert_array_equal(d_f, np.zeros((1, 3)))
        np.testing.assert_array_equal(d_b, np.zeros((1, 3)))

    def test_first_order_effect_is_newton_step(self):
        env = sym_path(4, 0.9)
        rho = uniform(4)
        model = FbModel(np.eye(4), np.eye(4), rho)
        errors = []
        for eta in (1e-2, 1e-3):
            d_f, d_b = fb_newton_delta_exact(model, env)
            stepped = FbModel(model.f + eta * d_f, model.b + eta * d_b, rho)
            matrix_stepped = newton_step(model.operator(), env, eta=2 * eta)
            errors.append(np.abs(stepped.operator() - matrix_stepped).max())
        assert errors[0] < 1e-2
        assert errors[1] < 0.02 * errors[0]  # second order in the step size

    def test_kernels_preserved_over_100_steps(self):
        env = random_dense_mrp(116, 5, 0.7)
        model = random_model(116, 2, env)
        for _ in range(100):
            d_f, d_b = fb_newton_delta_exact(model, env)
            model = FbModel(model.f + 0.02 * d_f, model.b + 0.02 * d_b, model.rho)
            sf = np.linalg.svd(model.f, compute_uv=False)
            sb = np.linalg.svd(model.b, compute_uv=False)
            assert int(np.sum(sf > 1e-10)) == 2
            assert int(np.sum(sb > 1e-10)) == 2

    def test_sampled_newton_matches_exact_in_expectation(self):
        env = random_dense_mrp(117, 4, 0.8)
        rho = StateDistribution([0.4, 0.1, 0.3, 0.2])
        model = random_model(117, 2, env, rho)
        total_f = np.zeros_like(model.f)
        total_b = np.zeros_like(model.b)
        for s in range(4):
            for s2 in range(4):
                p_t = rho.weights[s] * env.transition[s, s2]
                if p_t == 0:
                    continue
                cross = newton_cross_stat(model, TransitionSample(s, s2, 0.0), 0.8)
                for s1 in range(4):
                    w = p_t * rho.weights[s1]
                    stepped = fb_newton_step_sampled(model, cross, s1, eta=1.0)
                    total_f += w * (stepped.f - model.f)
                    total_b += w * (stepped.b - model.b)
        d_f, d_b = fb_newton_delta_exact(model, env)
        rho_hat = rho.diag()
        np.testing.assert_allclose(total_f, d_f @ rho_hat, atol=1e-12)
        np.testing.assert_allclose(total_b, d_b @ rho_hat, atol=1e-12)


class TestValueReadout:
    def test_zero_reward_gives_zero_value(self):
        env = random_dense_mrp(118, 3, 0.8)
        model = random_model(118, 2, env)
        _, v = fb_value_exact(model, np.zeros(3))
        np.testing.assert_array_equal(v, np.zeros(3))

    def test_exact_factorization_reproduces_values(self):
        env = random_dense_mrp(119, 4, 0.8)
        rho = uniform(4)
        m_tilde = successor_exact(env) / rho.weights[None, :]
        model = FbModel(np.eye(4), m_tilde.T @ np.eye(4), rho)
        # F^T B = m_tilde requires B = m_tilde with F = Id
        model = FbModel(np.eye(4), m_tilde, rho)
        from successor_lab.mrp import value_exact

        _, v = fb_value_exact(model, env.reward_mean)
        np.testing.assert_allclose(v, value_exact(env), atol=1e-9)

    def test_rank_one_on_torus_flattens_to_mean_value(self):
        P = np.zeros((8, 8))
        for i in range(8):
            P[i, (i + 1) % 8] += 0.5
            P[i, (i - 1) % 8] += 0.5
        env = FiniteMrp(8, P, np.zeros(8), np.zeros(8), 0.9)
        model = random_model(120, 1, env)
        # the factor magnitudes scale with the top singular value here, so
        # the stable step size is smaller than on the small chains
        model, converged, _ = fb_fixed_point(model, env, FbVariant.parse("fb"), eta=0.1)
        assert converged
        rewards = np.full(8, 0.7)
        _, v = fb_value_exact(model, rewards)
        np.testing.assert_allclose(v, np.full(8, 0.7 / (1 - 0.9)), atol=1e-3)

    def test_streamed_embedding_matches_exact_on_balanced_stream(self):
        env = random_dense_mrp(121, 4, 0.8)
        model = random_model(121, 2, env)
        rewards = philox(122).normal(size=4)
        # a stream visiting each state equally often reproduces uniform rho
        samples = [(s, float(rewards[s])) for _ in range(50) for s in range(4)]
        emb_stream, v_stream = reward_embedding_stream(model, samples)
        emb_exact, v_exact_readout = fb_value_exact(model, rewards)
        np.testing.assert_allclose(emb_stream.b_of_r, emb_exact.b_of_r, atol=1e-12)
        np.testing.assert_allclose(v_stream, v_exact_readout, atol=1e-12)
        assert emb_stream.num_samples == 200


class TestSvdOracleAndClassification:
    def test_full_rank_returns_input(self):
        env = random_dense_mrp(123, 4, 0.8)
        M = successor_exact(env)
        rho = StateDistribution([0.4, 0.3, 0.2, 0.1])
        np.testing.assert_allclose(truncated_svd_oracle(M, rho, 4), M, atol=1e-10)

    def test_rank_zero_returns_zero(self):
        env = random_dense_mrp(124, 3, 0.8)
        M = successor_exact(env)
        np.testing.assert_array_equal(truncated_svd_oracle(M, uniform(3), 0), np.zeros((3, 3)))

    def test_uniform_rho_matches_plain_svd(self):
        rng = philox(125)
        M = np.diag([5.0, 3.0, 1.0, 0.5]) + 0.01 * rng.normal(size=(4, 4))
        rho = uniform(4)
        got = truncated_svd_oracle(M, rho, 2)
        u, s, vt = np.linalg.svd(M)
        want = (u[:, :2] * s[:2]) @ vt[:2]
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_converged_fb_is_a_truncated_svd(self):
        env = sym_path(5, 0.8)
        model = random_model(126, 2, env)
        model, converged, _ = fb_fixed_point(model, env, FbVariant.parse("fb"), eta=1.0)
        assert converged
        report = classify_fixed_point(model, env, FbVariant.parse("fb"))
        assert report.svd_coincide < 1e-6
        assert report.svd_orthogonal < 1e-6
        oracle = truncated_svd_oracle(successor_exact(env), model.rho, 2)
        assert np.abs(model.operator() - oracle).max() < 1e-5

    def test_converged_ff_image_is_stable_and_top_aligned(self):
        env = sym_path(5, 0.8)
        model = random_model(127, 1, env)
        model, converged, _ = fb_fixed_point(model, env, FbVariant.parse("ff"), eta=1.0)
        assert converged
        report = classify_fixed_point(model, env, FbVariant.parse("ff"))
        assert report.image_stable < 1e-6
        # the walk is doubly stochastic: the dominant invariant direction is
        # the constant vector
        u = np.linalg.svd(model.operator())[0][:, 0]
        ones = np.ones(5) / np.sqrt(5)
        assert abs(abs(u @ ones) - 1.0) < 1e-4

    def test_converged_bb_is_a_projection_of_truth(self):
        env = sym_path(5, 0.8)
        model = random_model(128, 2, env)
        model, converged, _ = fb_fixed_point(model, env, FbVariant.parse("bb"), eta=1.0)
        assert converged
        report = classify_fixed_point(model, env, FbVariant.parse("bb"))
        assert report.projection_identity < 1e-6

    def test_classification_requires_a_fixed_point(self):
        env = sym_path(4, 0.8)
        model = random_model(129, 2, env)
        with pytest.raises(NotAFixedPointError):
            classify_fixed_point(model, env, FbVariant.parse("fb"))

    def test_local_minimum_under_perturbations(self):
        env = sym_path(5, 0.8)
        rho = uniform(5)
        m_tilde_star = successor_exact(env) / rho.weights[None, :]
        model = random_model(130, 2, env)
        model, converged, _ = fb_fixed_point(model, env, FbVariant.parse("fb"), eta=1.0)
        assert converged

        def loss(m):
            diff = m.f.T @ m.b - m_tilde_star
            return float(np.einsum("i,j,ij->", rho.weights, rho.weights, diff * diff))

        base = loss(model)
        rng = philox(130)
        for _ in range(20):
            df = 1e-5 * rng.normal(size=model.f.shape)
            db = 1e-5 * rng.normal(size=model.b.shape)
            perturbed = FbModel(model.f + df, model.b + db, rho)
            assert loss(perturbed) >= base - 1e-9

    def test_positivity_of_the_weighted_laplacian_form(self):
        env = random_dense_mrp(131, 6, 0.9)
        rho = stationary_distribution(env)
        quad = rho.diag() @ laplacian(env)
        rng = philox(131)
        for _ in range(1000):
            f = rng.normal(size=6)
            assert f @ quad @ f > 0.0


class TestFlowMatch:
    def test_symmetric_chain_tracks_newton_flow(self):
        env = sym_path(4, 0.9)
        report = fb_vs_newton_flow(env, FbVariant.parse("fb"), t_end=10.0, step=1e-3)
        assert report.symmetric
        assert report.initial_commutator == 0.0
        assert report.max_divergence < 1e-6

    def test_other_variants_match_with_identity_init(self):
        env = sym_path(3, 0.8)
        for code in ("ff", "bf", "bb"):
            report = fb_vs_newton_flow(env, FbVariant.parse(code), t_end=5.0, step=1e-3)
            assert report.max_divergence < 1e-6, code

    def test_asymmetric_is_rejected_then_diverges_when_forced(self):
        env = random_dense_mrp(132, 4, 0.8)
        with pytest.raises(ValueError):
            fb_vs_newton_flow(env, FbVariant.parse("fb"))
        report = fb_vs_newton_flow(
            env, FbVariant.parse("fb"), t_end=5.0, step=1e-3, allow_asymmetric=True
        )
        assert not report.symmetric
        assert report.max_divergence > 1e-3


class TestCheckpoints:
    def test_roundtrip(self, tmp_path):
        env = random_dense_mrp(133, 3, 0.8)
        model = random_model(133, 2, env)
        path = tmp_path / "fb.json"
        save_fb_checkpoint(path, model)
        loaded = load_fb_checkpoint(path)
        np.testing.assert_array_equal(loaded.f, model.f)
        np.testing.assert_array_equal(loaded.b, model.b)
        np.testing.assert_array_equal(loaded.rho.weights, model.rho.weights)

    def test_rank_mismatch_rejected(self, tmp_path):
        import json

        path = tmp_path / "bad.json"
        payload = {"r": 3, "F": [[1.0, 0.0]], "B": [[0.0, 1.0]], "rho": [0.5, 0.5]}
        path.write_text(json.dumps(payload))
        with pytest.raises(ValueError):
            load_fb_checkpoint(path)
