"""Explicit finite-difference solvers for the two fully observed Bermudan benchmarks.

Both problems live on a rectangle with coefficients that vary only along the
first axis, so one time step is a 9-point stencil whose weights are vectors
over axis 0.  First derivatives are central unless the cell Peclet number
exceeds 2, in which case they are upwinded.  Boundaries use linear
extrapolation (zero second derivative).  The obstacle is enforced only at the
exercise dates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .kalman import RiccatiSolution, conditional_payoff, riccati_solve
from .model import LinearGaussianParams, SteinSteinParams


class PDEStabilityError(ValueError):
    """The requested explicit time step violates the stability bound."""


@dataclass(frozen=True)
class Grid2D:
    """Rectangular grid with ``n1 x n2`` nodes and ``n_steps`` time steps on [0, T].

    ``n_steps = None`` picks the smallest stable count (at least 8000) that
    is a multiple of the number of exercise intervals ``M``.
    """

    x1: tuple[float, float]
    n1: int
    x2: tuple[float, float]
    n2: int
    T: float
    M: int
    n_steps: int | None = None

    def __post_init__(self):
        if self.n1 < 3 or self.n2 < 3:
            raise ValueError("need at least 3 nodes per axis")
        if not (self.x1[1] > self.x1[0] and self.x2[1] > self.x2[0]):
            raise ValueError("axis ranges must be increasing")
        if self.M < 1 or not self.T > 0:
            raise ValueError("need T > 0 and M >= 1")
        if self.n_steps is not None and (self.n_steps < self.M or self.n_steps % self.M):
            raise ValueError("n_steps must be a positive multiple of M so exercise dates are grid times")

    @property
    def axis1(self) -> np.ndarray:
        return np.linspace(self.x1[0], self.x1[1], self.n1)

    @property
    def axis2(self) -> np.ndarray:
        return np.linspace(self.x2[0], self.x2[1], self.n2)

    @property
    def h1(self) -> float:
        return (self.x1[1] - self.x1[0]) / (self.n1 - 1)

    @property
    def h2(self) -> float:
        return (self.x2[1] - self.x2[0]) / (self.n2 - 1)

    def exercise_times(self) -> np.ndarray:
        return np.arange(self.M + 1) * (self.T / self.M)

    def refined(self) -> "Grid2D":
        """Twice the nodes per axis and four times the steps."""
        steps = None if self.n_steps is None else 4 * self.n_steps
        return Grid2D(self.x1, 2 * self.n1 - 1, self.x2, 2 * self.n2 - 1, self.T, self.M, steps)


@dataclass
class SolverResult:
    grid: Grid2D
    value: np.ndarray                       # (n1, n2) at t = 0
    exercise_masks: np.ndarray              # (M + 1, n1, n2) bool, True where stopping
    exercise_times: np.ndarray
    cfl: float                              # max dt * (sum of |off-diagonal weights|)
    n_steps: int
    surfaces: np.ndarray | None = None      # (M + 1, n1, n2) after the obstacle, if kept
    meta: dict = field(default_factory=dict)


@dataclass
class _Coefficients:
    """Generator ``A V_11 + C V_12 + B V_22 + D V_1 + E V_2 - r V`` with arrays over axis 0."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    r: float


def _weights(c: _Coefficients, h1: float, h2: float):
    """Stencil weight vectors ``(wm, w0, wp, zm, zp, xc)`` and the stability sum."""

    def axis(diff, drift, h):
        lo = diff / h ** 2 - drift / (2 * h)
        hi = diff / h ** 2 + drift / (2 * h)
        mid = -2.0 * diff / h ** 2
        up = np.abs(drift) * h > 2.0 * diff
        fwd = up & (drift > 0)
        bwd = up & (drift <= 0)
        lo = np.where(fwd, diff / h ** 2, np.where(bwd, diff / h ** 2 - drift / h, lo))
        hi = np.where(fwd, diff / h ** 2 + drift / h, np.where(bwd, diff / h ** 2, hi))
        mid = np.where(up, -2.0 * diff / h ** 2 - np.abs(drift) / h, mid)
        return lo, mid, hi

    wm, m1, wp = axis(c.A, c.D, h1)
    zm, m2, zp = axis(c.B, c.E, h2)
    xc = c.C / (4.0 * h1 * h2)
    w0 = m1 + m2 - c.r
    rate = np.abs(wm) + np.abs(wp) + np.abs(zm) + np.abs(zp) + 4.0 * np.abs(xc) + c.r
    return wm, w0, wp, zm, zp, xc, float(np.max(rate))


def _solve(grid: Grid2D, coef_at: Callable[[float], _Coefficients], obstacle_at: Callable[[float], np.ndarray],
           *, european: bool, keep_surfaces: bool, backend: str | None) -> SolverResult:
    kern = _kernels.module(backend)
    h1, h2 = grid.h1, grid.h2
    # the bound is checked at the largest rate over [0, T]
    probe = [coef_at(t) for t in np.linspace(0.0, grid.T, 11)]
    max_rate = max(_weights(c, h1, h2)[-1] for c in probe)
    stable = math.ceil(grid.T * max_rate / 0.98)
    if grid.n_steps is None:
        n_steps = max(8000, stable)
        n_steps = grid.M * math.ceil(n_steps / grid.M)
    else:
        n_steps = grid.n_steps
    dt = grid.T / n_steps
    cfl = dt * max_rate
    if cfl > 1.0:
        raise PDEStabilityError(f"explicit scheme unstable: dt * rate = {cfl:.3f} > 1; "
                                f"use at least {stable} time steps")
    per_ex = n_steps // grid.M
    times = grid.exercise_times()
    M = grid.M
    masks = np.zeros((M + 1, grid.n1, grid.n2), dtype=bool)
    surfaces = np.empty((M + 1, grid.n1, grid.n2)) if keep_surfaces else None
    V = np.array(obstacle_at(grid.T), dtype=float, order="C")
    masks[M] = True
    if keep_surfaces:
        surfaces[M] = V
    out = np.empty_like(V)
    for k in range(n_steps, 0, -1):
        t_hi = k * dt
        w = [np.ascontiguousarray(a, dtype=float) for a in _weights(coef_at(t_hi), h1, h2)[:-1]]
        kern.explicit_step(V, out, *w, dt)
        V, out = out, V
        if (k - 1) % per_ex == 0:
            e = (k - 1) // per_ex
            if not european or e == M:
                G = obstacle_at(times[e])
                masks[e] = G >= V
                np.maximum(V, G, out=V)
            if keep_surfaces:
                surfaces[e] = V
    if not np.all(np.isfinite(V)):
        raise FloatingPointError("non-finite value surface")
    return SolverResult(grid=grid, value=V.copy(), exercise_masks=masks, exercise_times=times, cfl=cfl,
                        n_steps=n_steps, surfaces=surfaces)


# ---------------------------------------------------------------------------
# Kalman-reduced problem in (m, y)


def kalman_grid(T: float = 1.0, M: int = 20, n1: int = 400, n2: int = 400, n_steps: int | None = None,
                m_range=(-0.6, 0.6), y_max: float = 4.0) -> Grid2D:
    """Default grid: m in [-0.6, 0.6], y nodes ``y_max / n2, ..., y_max``."""
    return Grid2D(tuple(m_range), n1, (y_max / n2, y_max), n2, T, M, n_steps)


def solve_bermudan_kalman(params: LinearGaussianParams, riccati: RiccatiSolution | float, grid: Grid2D, *,
                          european: bool = False, keep_surfaces: bool = False,
                          backend: str | None = None) -> SolverResult:
    """Bermudan value ``V(0, m, y)`` of the Kalman-reduced problem.

    ``riccati`` is a solved variance path or the initial variance ``P0``.
    """
    p = params
    if not isinstance(riccati, RiccatiSolution):
        riccati = riccati_solve(p, float(riccati), grid.T)
    m = grid.axis1
    y = grid.axis2
    if np.any(y <= 0):
        raise ValueError("the observation axis must be positive")
    ones = np.ones_like(m)

    def coef_at(t):
        P = float(riccati(t))
        gain = p.rho * p.sigma_x + P / p.sigma_y
        return _Coefficients(A=0.5 * gain * gain * ones, B=0.5 * p.sigma_y ** 2 * ones,
                             C=(p.rho * p.sigma_x * p.sigma_y + P) * ones, D=-p.kappa * m, E=m - p.a, r=p.r)

    def obstacle_at(t):
        return conditional_payoff(m[:, None], float(riccati(t)), y[None, :], p)

    res = _solve(grid, coef_at, obstacle_at, european=european, keep_surfaces=keep_surfaces, backend=backend)
    res.meta.update(problem="kalman", P0=float(riccati.P[0]))
    return res


# ---------------------------------------------------------------------------
# fully observed Stein-Stein problem in (x, log-price)


def stein_stein_grid(params: SteinSteinParams, y0: float, x0: float | None = None, M: int = 20,
                     n1: int = 400, n2: int = 400, n_steps: int | None = None, width: float = 5.0) -> Grid2D:
    """x in ``x0 +- width * alpha / sqrt(2 kappa)``, y in ``y0 +- width * sigma_bar * sqrt(T)``."""
    p = params
    x0 = p.sigma_bar if x0 is None else x0
    hx = width * p.alpha / math.sqrt(2.0 * p.kappa) if p.kappa > 0 else width * p.alpha * math.sqrt(p.T)
    hy = width * p.sigma_bar * math.sqrt(p.T)
    return Grid2D((x0 - hx, x0 + hx), n1, (y0 - hy, y0 + hy), n2, p.T, M, n_steps)


def solve_bermudan_stein_stein(params: SteinSteinParams, grid: Grid2D, *, european: bool = False,
                               keep_surfaces: bool = False, backend: str | None = None) -> SolverResult:
    """Bermudan put value ``V(0, x, y)`` with full observation of the volatility."""
    p = params
    x = grid.axis1
    y = grid.axis2
    coef = _Coefficients(A=0.5 * p.alpha ** 2 * np.ones_like(x), B=0.5 * x * x, C=p.rho * p.alpha * x,
                         D=p.kappa * (p.sigma_bar - x), E=p.r - 0.5 * x * x, r=p.r)
    put = np.broadcast_to(np.maximum(p.K - np.exp(y), 0.0)[None, :], (grid.n1, grid.n2))

    res = _solve(grid, lambda t: coef, lambda t: put, european=european, keep_surfaces=keep_surfaces,
                 backend=backend)
    res.meta.update(problem="stein_stein")
    return res


# ---------------------------------------------------------------------------
# queries and export


def query_value(result: SolverResult, point, surface: np.ndarray | None = None) -> float:
    """Bilinear interpolation of the t = 0 surface (or ``surface``) at ``(x1, x2)``."""
    g = result.grid
    V = result.value if surface is None else surface
    p1, p2 = float(point[0]), float(point[1])
    eps1, eps2 = 1e-12 * g.h1, 1e-12 * g.h2
    if not (g.x1[0] - eps1 <= p1 <= g.x1[1] + eps1 and g.x2[0] - eps2 <= p2 <= g.x2[1] + eps2):
        raise ValueError(f"point {point} outside the grid {g.x1} x {g.x2}")
    s1 = min(max((p1 - g.x1[0]) / g.h1, 0.0), g.n1 - 1.0)
    s2 = min(max((p2 - g.x2[0]) / g.h2, 0.0), g.n2 - 1.0)
    i = min(int(s1), g.n1 - 2)
    j = min(int(s2), g.n2 - 2)
    a, b = s1 - i, s2 - j
    return float((1 - a) * (1 - b) * V[i, j] + a * (1 - b) * V[i + 1, j]
                 + (1 - a) * b * V[i, j + 1] + a * b * V[i + 1, j + 1])


def exercise_boundary(result: SolverResult, e: int) -> np.ndarray:
    """Per axis-1 node, the smallest axis-2 coordinate in the stopping region (NaN if none)."""
    mask = result.exercise_masks[e]
    y = result.grid.axis2
    out = np.full(result.grid.n1, np.nan)
    hit = mask.any(axis=1)
    out[hit] = y[np.argmax(mask[hit], axis=1)]
    return out


def write_surface_csv(result: SolverResult, path, e: int | None = None) -> None:
    """Node coordinates, value and exercise flag; ``e`` selects an exercise date (default t = 0)."""
    g = result.grid
    e = 0 if e is None else e
    V = result.value if e == 0 or result.surfaces is None else result.surfaces[e]
    mask = result.exercise_masks[e]
    a1, a2 = g.axis1, g.axis2
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x1", "x2", "value", "exercise"])
        t = repr(float(result.exercise_times[e]))
        for i in range(g.n1):
            for j in range(g.n2):
                w.writerow([t, repr(float(a1[i])), repr(float(a2[j])), repr(float(V[i, j])), int(mask[i, j])])


__all__ = [
    "Grid2D", "PDEStabilityError", "SolverResult", "exercise_boundary", "kalman_grid", "query_value",
    "solve_bermudan_kalman", "solve_bermudan_stein_stein", "stein_stein_grid", "write_surface_csv",
]
