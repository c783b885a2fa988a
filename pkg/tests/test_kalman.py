import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad, solve_ivp

from pobstop import LinearGaussianParams
from pobstop.kalman import (KalmanState, conditional_payoff, kalman_filter_means, kalman_step, riccati_solve,
                            riccati_steady_state, simulate_filter_paths, terminal_payoff_expectation,
                            transition_moments)
from pobstop.model import SimGrid

P = LinearGaussianParams()


def _rhs(t, P_, p=P):
    gain = p.rho * p.sigma_x + P_ / p.sigma_y
    return -2 * p.kappa * P_ + p.sigma_x ** 2 - gain * gain


class TestRiccati:
    def test_steady_state_is_a_root(self):
        Ps = riccati_steady_state(P)
        assert Ps > 0
        assert _rhs(0, Ps) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("P0", [0.0, 0.05 ** 2, 0.1 ** 2, 0.05])
    def test_matches_adaptive_solver(self, P0):
        sol = riccati_solve(P, P0, 1.0)
        ref = solve_ivp(_rhs, (0, 1), [P0], rtol=1e-11, atol=1e-13, dense_output=True)
        t = np.linspace(0, 1, 11)
        np.testing.assert_allclose(sol(t), ref.sol(t)[0], atol=1e-9)

    def test_relaxes_to_steady_state(self):
        assert riccati_solve(P, 0.0, 20.0).steady_state == pytest.approx(riccati_steady_state(P), rel=1e-8)

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            riccati_solve(P, -1.0, 1.0)
        with pytest.raises(ValueError):
            KalmanState(0.0, -1.0)


class TestFilterMeans:
    def test_vectorized_matches_steps(self):
        ric = riccati_solve(P, 0.0025, 1.0)
        dY = np.random.default_rng(0).normal(0, 0.01, (3, 100))
        m = kalman_filter_means(P, 0.0, ric, dY, 0.01)
        for k in range(3):
            s = KalmanState(0.0, 0.0025)
            for i in range(100):
                s = kalman_step(s, P, dY[k, i], ric, 0.01)
            assert s.m == pytest.approx(m[k, -1], abs=1e-14)

    def test_innovation_paths(self):
        g = SimGrid(1.0, 0.05, 0.01)
        t, m, y = simulate_filter_paths(P, 0.0, 0.0025, 2.0, g, 4000, 1)
        assert m.shape == y.shape == (4000, 101)
        # E[m_T] follows the OU mean (Euler form) because the innovation has zero mean
        expected = 0.0
        se = m[:, -1].std() / math.sqrt(4000)
        assert abs(m[:, -1].mean() - expected) < 4 * se


class TestConditionalPayoff:
    def test_zero_variance_is_intrinsic(self):
        assert conditional_payoff(0.1, 0.0, 2.0, P) == pytest.approx(max(2.0 * 1.1 - 2.0, 0.0))
        assert conditional_payoff(-0.5, 0.0, 2.0, P) == 0.0

    @given(st.floats(-0.3, 0.3), st.floats(1e-4, 0.05), st.floats(0.5, 4.0))
    def test_bounds(self, m, var, y):
        v = conditional_payoff(m, var, y, P)
        intrinsic = y * (1 + m) - 2.0
        assert v >= max(intrinsic, 0.0) - 1e-12          # Jensen
        assert v <= max(intrinsic, 0.0) + y * math.sqrt(var) / math.sqrt(2 * math.pi) + 1e-12

    def test_against_quadrature(self):
        m, var, y = 0.05, 0.01, 2.1
        f = lambda x: max(y * (1 + x) - 2, 0) * math.exp(-(x - m) ** 2 / (2 * var)) / math.sqrt(2 * math.pi * var)
        ref, _ = quad(f, m - 12 * math.sqrt(var), m + 12 * math.sqrt(var), points=[2 / y - 1], limit=200)
        assert conditional_payoff(m, var, y, P) == pytest.approx(ref, abs=1e-10)

    def test_requires_positive_y(self):
        with pytest.raises(ValueError):
            conditional_payoff(0.0, 0.01, -1.0, P)


class TestTransition:
    @pytest.mark.parametrize("tau", [0.05, 0.5, 1.0])
    def test_moments_against_integrals(self, tau):
        p = P
        k = p.kappa
        phi = lambda v: (1 - math.exp(-k * v)) / k
        var_x = p.sigma_x ** 2 * quad(lambda v: math.exp(-2 * k * v), 0, tau)[0]
        var_y = (p.sigma_x ** 2 * quad(lambda v: phi(v) ** 2, 0, tau)[0] + p.sigma_y ** 2 * tau
                 + 2 * p.rho * p.sigma_x * p.sigma_y * quad(phi, 0, tau)[0])
        cov = (p.sigma_x ** 2 * quad(lambda v: math.exp(-k * v) * phi(v), 0, tau)[0]
               + p.rho * p.sigma_x * p.sigma_y * quad(lambda v: math.exp(-k * v), 0, tau)[0])
        ex, ey, vx, vy, cxy = transition_moments(p, tau)
        assert ex == pytest.approx(math.exp(-k * tau))
        assert ey == pytest.approx(phi(tau))
        assert (vx, vy, cxy) == pytest.approx((var_x, var_y, cov), rel=1e-9)

    def test_small_kappa_limit(self):
        p0 = LinearGaussianParams(kappa=0.0)
        ex, ey, vx, vy, cxy = transition_moments(p0, 0.5)
        assert (ex, ey) == (1.0, 0.5)
        assert vx == pytest.approx(p0.sigma_x ** 2 * 0.5)

    def test_terminal_expectation_quadrature_converges(self):
        x = np.array([-0.1, 0.0, 0.2])
        y = np.array([1.9, 2.0, 2.1])
        a = terminal_payoff_expectation(P, 0.7, x, y, order=12)
        b = terminal_payoff_expectation(P, 0.7, x, y, order=60)
        np.testing.assert_allclose(a, b, atol=2e-5)

    def test_terminal_expectation_against_exact_sampling(self):
        tau, x, y = 0.6, 0.05, 2.0
        ex, ey, vx, vy, cxy = transition_moments(P, tau)
        rng = np.random.default_rng(3)
        z = rng.multivariate_normal([0, 0], [[vx, cxy], [cxy, vy]], size=1_000_000)
        xT = ex * x + z[:, 0]
        yT = y + ey * x - P.a * tau + z[:, 1]
        v = np.maximum(yT * (1 + xT) - 2, 0)
        est = terminal_payoff_expectation(P, tau, x, y, order=16)
        assert abs(v.mean() - est) < 3 * v.std() / 1000

    def test_zero_horizon_is_payoff(self):
        assert terminal_payoff_expectation(P, 0.0, 0.1, 2.0) == pytest.approx(0.2)
