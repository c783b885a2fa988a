"""Kalman-Bucy benchmark for the linear-Gaussian drift model.

The conditional law of X_t given the observations is N(m_t, P_t) when X_0 is
Gaussian; P_t solves a deterministic Riccati equation and m_t is driven by the
innovation process.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtr

from .model import LinearGaussianParams, SimGrid
from .rng import as_factory

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class KalmanState:
    m: float
    P: float
    t: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.P) and self.P >= 0):
            raise ValueError(f"conditional variance must be finite and >= 0, got {self.P}")


@dataclass(frozen=True)
class RiccatiSolution:
    """Tabulated P_t with linear interpolation in t."""

    times: np.ndarray
    P: np.ndarray

    def __call__(self, t):
        return np.interp(t, self.times, self.P)

    @property
    def steady_state(self) -> float:
        return float(self.P[-1])


def _riccati_rhs(P: float, p: LinearGaussianParams) -> float:
    gain = p.rho * p.sigma_x + P / p.sigma_y
    return -2.0 * p.kappa * P + p.sigma_x ** 2 - gain * gain


def riccati_steady_state(p: LinearGaussianParams) -> float:
    """Nonnegative root of the stationary Riccati equation."""
    # -P^2/sy^2 - (2 kappa + 2 rho sx / sy) P + sx^2 (1 - rho^2) = 0
    A = 1.0 / p.sigma_y ** 2
    B = 2.0 * p.kappa + 2.0 * p.rho * p.sigma_x / p.sigma_y
    C = -(p.sigma_x ** 2) * (1.0 - p.rho ** 2)
    disc = B * B - 4.0 * A * C
    return max(0.0, (-B + math.sqrt(disc)) / (2.0 * A))


def riccati_solve(params: LinearGaussianParams, P0: float, T: float, dt_max: float = 0.01,
                  refine: int = 4) -> RiccatiSolution:
    """Classical RK4 on a uniform grid with step ``dt_max / refine``."""
    if P0 < 0:
        raise ValueError("P0 must be nonnegative")
    n = max(1, math.ceil(T / dt_max - 1e-9)) * refine
    h = T / n
    P = np.empty(n + 1)
    P[0] = P0
    cur = float(P0)
    for i in range(n):
        k1 = _riccati_rhs(cur, params)
        k2 = _riccati_rhs(cur + 0.5 * h * k1, params)
        k3 = _riccati_rhs(cur + 0.5 * h * k2, params)
        k4 = _riccati_rhs(cur + h * k3, params)
        cur = max(0.0, cur + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0)
        P[i + 1] = cur
    return RiccatiSolution(times=np.linspace(0.0, T, n + 1), P=P)


def kalman_gain(P, params: LinearGaussianParams):
    return params.rho * params.sigma_x + np.asarray(P) / params.sigma_y


def kalman_step(state: KalmanState, params: LinearGaussianParams, dy: float,
                riccati: RiccatiSolution, h_step: float) -> KalmanState:
    """Euler update of the conditional mean driven by the innovation ``dy - (m - a) h``."""
    p = params
    innovation = (dy - (state.m - p.a) * h_step) / p.sigma_y
    m = state.m - p.kappa * state.m * h_step + kalman_gain(state.P, p) * innovation
    t = state.t + h_step
    return KalmanState(m=float(m), P=float(riccati(t)), t=t)


def kalman_filter_means(params: LinearGaussianParams, m0: float, riccati: RiccatiSolution,
                        dY: np.ndarray, h_step: float) -> np.ndarray:
    """Vectorized ``kalman_step`` over paths: ``dY`` has shape ``(N, S)``; returns m of shape ``(N, S + 1)``."""
    p = params
    dY = np.atleast_2d(dY)
    N, S = dY.shape
    m = np.empty((N, S + 1))
    m[:, 0] = m0
    for i in range(S):
        P = float(riccati(i * h_step))
        innovation = (dY[:, i] - (m[:, i] - p.a) * h_step) / p.sigma_y
        m[:, i + 1] = m[:, i] - p.kappa * m[:, i] * h_step + kalman_gain(P, p) * innovation
    return m


def conditional_payoff(m, P, y, params: LinearGaussianParams):
    """E[(y (c1 + X) - c2)_+] for X ~ N(m, P), undiscounted."""
    m, P, y = np.broadcast_arrays(np.asarray(m, float), np.asarray(P, float), np.asarray(y, float))
    if np.any(y <= 0):
        raise ValueError("conditional_payoff requires y > 0")
    if np.any(P < 0):
        raise ValueError("conditional_payoff requires P >= 0")
    intrinsic = (params.c1 + m) * y - params.c2
    s = y * np.sqrt(P)
    with np.errstate(divide="ignore", invalid="ignore"):
        xs = np.where(s > 0, -intrinsic / np.where(s > 0, s, 1.0), 0.0)
        val = s * _INV_SQRT_2PI * np.exp(-0.5 * xs * xs) + intrinsic * ndtr(-xs)
    out = np.where(s > 0, val, np.maximum(intrinsic, 0.0))
    return out if out.ndim else float(out)


def simulate_filter_paths(params: LinearGaussianParams, m0: float, P0: float, y0: float,
                          grid: SimGrid, N: int, rng, riccati: RiccatiSolution | None = None):
    """Joint (m_t, Y_t) paths under the physical measure driven by the innovation.

    Returns ``times, m, y`` with arrays of shape ``(N, n_sub + 1)``.
    """
    p = params
    streams = as_factory(rng)
    ric = riccati if riccati is not None else riccati_solve(p, P0, grid.T, grid.h)
    S, h = grid.n_sub, grid.h
    dW = np.empty((N, S))
    for k in range(N):
        dW[k] = streams.generator("innovation", k).standard_normal(S)
    dW *= math.sqrt(h)
    m = np.empty((N, S + 1))
    y = np.empty((N, S + 1))
    m[:, 0], y[:, 0] = m0, y0
    for i in range(S):
        gain = kalman_gain(float(ric(i * h)), p)
        y[:, i + 1] = y[:, i] + (m[:, i] - p.a) * h + p.sigma_y * dW[:, i]
        m[:, i + 1] = m[:, i] - p.kappa * m[:, i] * h + gain * dW[:, i]
    return grid.sub_times(), m, y


# ---------------------------------------------------------------------------
# Gaussian transition of (X, Y) and the terminal-payoff expectation


def _phi1(k: float, tau: float) -> float:
    """(1 - exp(-k tau)) / k with the k -> 0 limit."""
    return -math.expm1(-k * tau) / k if k * tau > 1e-12 else tau


def _phi2(k: float, tau: float) -> float:
    """int_0^tau (1 - exp(-k u))^2 du / k^2."""
    z = k * tau
    if z < 1e-3:
        return tau ** 3 / 3.0 * (1.0 - 0.75 * z + 0.35 * z * z)
    return (tau - 2.0 * _phi1(k, tau) + _phi1(2.0 * k, tau)) / (k * k)


@lru_cache(maxsize=4096)
def transition_moments(params: LinearGaussianParams, tau: float):
    """Coefficients of the law of (X_{t+tau}, Y_{t+tau}) given (X_t, Y_t) = (x, y).

    Means are ``ex * x`` and ``y + ey * x - a tau``; returns
    ``(ex, ey, var_x, var_y, cov_xy)``.
    """
    p = params
    k, sx, sy, rho = p.kappa, p.sigma_x, p.sigma_y, p.rho
    ex = math.exp(-k * tau)
    ey = _phi1(k, tau)
    var_x = sx * sx * _phi1(2.0 * k, tau)
    int_e = _phi1(k, tau)                        # int_0^tau e^{-k u} du
    int_one_minus = tau - int_e                  # int_0^tau (1 - e^{-k u}) du
    var_y = sx * sx * _phi2(k, tau) + sy * sy * tau
    if k * tau > 1e-12:
        var_y += 2.0 * rho * sx * sy * int_one_minus / k
        cov = sx * sx * (int_e - _phi1(2.0 * k, tau)) / k + rho * sx * sy * int_e
    else:
        var_y += rho * sx * sy * tau * tau
        cov = 0.5 * sx * sx * tau * tau + rho * sx * sy * tau
    var_y = max(var_y, 0.0)
    return ex, ey, var_x, var_y, cov


@lru_cache(maxsize=64)
def hermite_rule(order: int):
    """Probabilists' Gauss-Hermite nodes and weights summing to one."""
    if order < 1:
        raise ValueError("quadrature order must be >= 1")
    z, w = np.polynomial.hermite_e.hermegauss(order)
    return z, w / w.sum()


def _call_on_gaussian(k, m, s, c2):
    """E[(k Z - c2)_+] for Z ~ N(m, s^2)."""
    A = k * m - c2
    B = np.abs(k) * s
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(B > 0, A / np.where(B > 0, B, 1.0), 0.0)
        val = A * ndtr(z) + B * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return np.where(B > 0, val, np.maximum(A, 0.0))


def gauss_hermite_coefficients(params: LinearGaussianParams, tau: float):
    """Quadrature layout for :func:`terminal_payoff_expectation`.

    Returns ``(ex, ey, sy, beta, s_cond)``: Y_T = my + sy Z and, given Z,
    X_T ~ N(mx + beta Z, s_cond^2).
    """
    ex, ey, vx, vy, cxy = transition_moments(params, float(tau))
    if vy > 0:
        sy = math.sqrt(vy)
        beta = cxy / sy
        s_cond = math.sqrt(max(vx - cxy * cxy / vy, 0.0))
    else:
        sy, beta, s_cond = 0.0, 0.0, math.sqrt(vx)
    return ex, ey, sy, beta, s_cond


def terminal_payoff_expectation(params: LinearGaussianParams, tau: float, x, y, order: int = 12):
    """E[(Y_T (c1 + X_T) - c2)_+ | X_t = x, Y_t = y] with ``tau = T - t``, undiscounted.

    Gauss-Hermite over Y_T; the conditional expectation in X_T given Y_T is
    exact.  Conditioning this way keeps the quadrature integrand smooth:
    X_T given Y_T retains most of its variance.
    """
    if order < 2:
        raise ValueError("quadrature order must be >= 2")
    p = params
    x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    if tau <= 0:
        return np.maximum(y * (p.c1 + x) - p.c2, 0.0)
    ex, ey, sy, beta, s_cond = gauss_hermite_coefficients(p, tau)
    mx = ex * x
    my = y + ey * x - p.a * tau
    z, w = hermite_rule(order)
    out = np.zeros(np.shape(x))
    for zk, wk in zip(z, w):
        u = my + sy * zk
        out = out + wk * _call_on_gaussian(u, p.c1 + mx + beta * zk, s_cond, p.c2)
    return out
