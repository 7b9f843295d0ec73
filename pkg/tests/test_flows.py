import numpy as np
import pytest

from successor_lab.flows import (
    FLOW_KINDS,
    FlowBlowupError,
    InsufficientDataError,
    NonDiagonalizableError,
    closed_form_flow,
    dyad_rates,
    integrate_flow,
    newton_mode,
    newton_mode_diverges,
    path_certificate,
    rate_fit,
    slow_mode_multiplicity,
    spectral_error,
)
from successor_lab.learners import backward_operator_apply, forward_operator_apply
from successor_lab.mrp import FiniteMrp, laplacian, successor_exact
from successor_lab.newton import newton_step

from conftest import philox, random_dense_mrp, two_cycle


def torus_mrp(n, gamma):
    P = np.zeros((n, n))
    for i in range(n):
        P[i, (i + 1) % n] += 0.5
        P[i, (i - 1) % n] += 0.5
    return FiniteMrp(n, P, np.zeros(n), np.zeros(n), gamma)


class TestIntegration:
    def test_all_flows_preserve_the_fixed_point(self):
        env = random_dense_mrp(91, 5, 0.8)
        m_star = successor_exact(env)
        for kind in FLOW_KINDS:
            traj = integrate_flow(kind, env, m_star, t_end=100.0, step=0.01)
            drift = np.abs(traj.final.m - m_star).max()
            assert drift < 1e-7, kind

    def test_forward_flow_matches_exponential(self):
        env = two_cycle(0.5)
        traj = integrate_flow("forward", env, np.zeros((2, 2)), t_end=3.0, step=1e-3)
        expected = closed_form_flow("forward", env, np.zeros((2, 2)), 3.0)
        assert np.abs(traj.final.m - expected).max() < 1e-6

    def test_backward_and_mixed_match_closed_forms(self):
        env = random_dense_mrp(92, 4, 0.7)
        m0 = philox(92).normal(size=(4, 4))
        for kind in ("backward", "mixed"):
            traj = integrate_flow(kind, env, m0, t_end=2.0, step=1e-3)
            expected = closed_form_flow(kind, env, m0, 2.0)
            assert np.abs(traj.final.m - expected).max() < 1e-6, kind

    def test_newton_flow_matches_moving_kernel_inverse(self):
        env = random_dense_mrp(93, 4, 0.8)
        m0 = np.eye(4)
        traj = integrate_flow("newton", env, m0, t_end=2.5, step=1e-3)
        expected = closed_form_flow("newton", env, m0, 2.5)
        assert np.abs(traj.final.m - expected).max() < 1e-6

    def test_newton_kernel_moves_on_a_line(self):
        env = random_dense_mrp(94, 4, 0.8)
        m0 = np.eye(4)
        p0 = np.zeros((4, 4))  # gamma*P0 = Id - inv(Id) = 0
        traj = integrate_flow("newton", env, m0, t_end=2.0, step=1e-3, record_every=500)
        for time, m in zip(traj.times, traj.values):
            if time == 0.0:
                continue
            p_t = (np.eye(4) - np.linalg.inv(m)) / env.discount
            expected = env.transition + np.exp(-time) * (p0 - env.transition)
            assert np.abs(p_t - expected).max() < 1e-6

    def test_newton_flow_preserves_rank(self):
        env = random_dense_mrp(95, 5, 0.7)
        u = philox(95).normal(size=(5, 2))
        m0 = u @ u.T  # rank 2
        traj = integrate_flow("newton", env, m0, t_end=1.0, step=1e-3, record_every=100)
        for m in traj.values:
            s = np.linalg.svd(m, compute_uv=False)
            assert int(np.sum(s > 1e-10)) == 2

    def test_blowup_detected(self):
        env = random_dense_mrp(96, 3, 0.8)
        m0 = -successor_exact(env)  # error eigenvalue 2 on the divergent half-line
        with pytest.raises(FlowBlowupError):
            integrate_flow("newton", env, m0, t_end=2.0, step=1e-3)

    def test_step_error_monitor_small(self):
        env = two_cycle(0.5)
        traj = integrate_flow("forward", env, np.zeros((2, 2)), t_end=1.0, step=1e-2)
        assert traj.max_step_error < 1e-8


class TestSpectral:
    def test_torus_eigenvalues_recovered(self):
        env = torus_mrp(8, 0.9)
        dec = spectral_error("forward", env, np.zeros((8, 8)))
        got = np.sort(dec.eigenvalues.real)
        want = np.sort([0.1 + 1.8 * np.sin(np.pi * k / 8) ** 2 for k in range(8)])
        np.testing.assert_allclose(got, want, atol=1e-9)
        assert np.abs(dec.eigenvalues.imag).max() < 1e-9

    def test_reconstruction_and_prediction(self):
        env = random_dense_mrp(97, 5, 0.85)
        m_star = successor_exact(env)
        e0 = philox(97).normal(size=(5, 5))
        for kind in ("forward", "backward", "mixed"):
            dec = spectral_error(kind, env, e0)
            assert dec.reconstruction_residual(e0) < 1e-8
            traj = integrate_flow(kind, env, m_star + e0, t_end=1.5, step=1e-3, record_every=300)
            for time, m in zip(traj.times, traj.values):
                predicted = dec.predict(float(time))
                assert np.abs((m - m_star) - predicted).max() < 1e-5

    def test_single_dyad_is_pure_exponential(self):
        env = random_dense_mrp(98, 4, 0.8)
        dec0 = spectral_error("forward", env, np.zeros((4, 4)))
        lam, U, W = dec0.eigenvalues, dec0.right_vectors, dec0.left_vectors
        i, j = 1, 2
        e0 = np.real(np.outer(U[:, i], W[j]))  # may be complex-paired; use a real dyad
        # use a real eigenpair when available, otherwise skip
        real_idx = [k for k in range(4) if abs(lam[k].imag) < 1e-12]
        if len(real_idx) >= 2:
            i, j = real_idx[0], real_idx[1]
            e0 = np.real(np.outer(U[:, i], W[j]))
            for kind, rate in (
                ("forward", lam[i].real),
                ("backward", lam[j].real),
                ("mixed", 0.5 * (lam[i] + lam[j]).real),
            ):
                dec = spectral_error(kind, env, e0)
                t = 0.7
                np.testing.assert_allclose(
                    dec.predict(t), np.exp(-t * rate) * e0, atol=1e-10
                )

    def test_spectral_lower_bound_for_stochastic_p(self):
        for seed in range(5):
            env = random_dense_mrp(200 + seed, 6, 0.9)
            dec = spectral_error("forward", env, np.zeros((6, 6)))
            assert dec.eigenvalues.real.min() >= 1.0 - 0.9 - 1e-9

    def test_mixed_mode_multiplicity_drops_to_one(self):
        env = torus_mrp(8, 0.9)
        dec = spectral_error("forward", env, np.zeros((8, 8)))
        lam = dec.eigenvalues
        assert slow_mode_multiplicity("forward", lam, 0.1, tol=1e-9) == 8
        assert slow_mode_multiplicity("backward", lam, 0.1, tol=1e-9) == 8
        assert slow_mode_multiplicity("mixed", lam, 0.1, tol=1e-9) == 1

    def test_mixed_rates_dominate_the_worst_factor(self):
        env = random_dense_mrp(99, 6, 0.9)
        lam = spectral_error("forward", env, np.zeros((6, 6))).eigenvalues
        mixed = dyad_rates("mixed", lam)
        fwd = dyad_rates("forward", lam)
        bwd = dyad_rates("backward", lam)
        assert np.all(mixed >= np.minimum(fwd, bwd) - 1e-12)

    def test_defective_laplacian_rejected(self):
        P = np.array([[0.0, 1.0], [0.0, 0.0]])  # substochastic Jordan block
        env = FiniteMrp(2, P, np.zeros(2), np.zeros(2), 0.9)
        with pytest.raises(NonDiagonalizableError):
            spectral_error("forward", env, np.zeros((2, 2)))


class TestNewtonModes:
    def test_zero_stays_zero(self):
        assert newton_mode(0.0, 3.0) == 0.0

    def test_negative_mode_decays_monotonically(self):
        # closed form from the reciprocal flow: 1/lam decays to -infinity
        ts = np.linspace(0.0, 5.0, 50)
        vals = [newton_mode(-1.0, t).real for t in ts]
        assert all(v < 0 for v in vals[:-1])
        assert all(vals[k + 1] > vals[k] for k in range(len(vals) - 1))
        assert abs(vals[-1]) < 1e-2
        diverges, _ = newton_mode_diverges(-1.0)
        assert not diverges

    def test_divergent_half_line(self):
        diverges, t_star = newton_mode_diverges(2.0)
        assert diverges
        assert t_star == pytest.approx(np.log(2.0))
        # the integrator reports blow-up by that time
        env = two_cycle(0.5)
        m_star = successor_exact(env)
        # error 2*Id: M0 = (Id - 2 Id) Delta^{-1} = -Delta^{-1}
        with pytest.raises(FlowBlowupError) as err:
            integrate_flow("newton", env, -m_star, t_end=np.log(2.0) + 0.05, step=1e-4)
        assert "t=" in str(err.value)

    def test_interior_point_converges(self):
        diverges, _ = newton_mode_diverges(0.5)
        assert not diverges
        assert abs(newton_mode(0.5, 10.0)) < 1e-3

    def test_complex_modes_do_not_diverge(self):
        diverges, _ = newton_mode_diverges(2.0 + 1.0j)
        assert not diverges


class TestCertificatesAndFits:
    def test_identity_certifies_horizon_zero(self):
        env = random_dense_mrp(101, 4, 0.8)
        ok, n = path_certificate(np.eye(4), env, max_n=5)
        assert ok and n == 0

    def test_forward_steps_certify_linear_growth(self):
        env = random_dense_mrp(102, 4, 0.8)
        M = np.eye(4)
        for t in range(1, 6):
            M = forward_operator_apply(M, env)
            ok, n = path_certificate(M, env, max_n=10, tol=1e-10)
            assert ok and n == t
        M = np.eye(4)
        for t in range(1, 6):
            M = backward_operator_apply(M, env)
            ok, n = path_certificate(M, env, max_n=10, tol=1e-10)
            assert ok and n == t

    def test_newton_steps_certify_doubling(self):
        env = random_dense_mrp(103, 4, 0.8)
        M = np.eye(4)
        for t in range(1, 5):
            M = newton_step(M, env, 1.0)
            ok, n = path_certificate(M, env, max_n=40, tol=1e-10)
            assert ok and n == 2**t - 1

    def test_no_match_reports_failure(self):
        env = random_dense_mrp(104, 4, 0.8)
        ok, n = path_certificate(np.full((4, 4), 0.123), env, max_n=6)
        assert not ok and n == -1

    def test_rate_fit_recovers_synthetic_rate(self):
        ts = np.linspace(0.0, 30.0, 400)
        errs = np.exp(-ts)
        assert rate_fit(ts, errs) == pytest.approx(1.0, abs=1e-6)

    def test_rate_fit_needs_points_in_regime(self):
        with pytest.raises(InsufficientDataError):
            rate_fit(np.array([0.0, 1.0]), np.array([5.0, 4.0]))
