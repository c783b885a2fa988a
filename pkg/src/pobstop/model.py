"""State/observation diffusion models and their Euler simulation.

A model is the pair

    dX = b(X) dt + alpha(X) dU + sigma(X) dW
    dY = h(X) dt + obs_vol(X) dU

with ``U`` (dimension ``d_y``) the observation noise and ``W`` (dimension
``d_w``) independent state noise.  When the observation noise has a constant
scale ``obs_scale`` the reference measure is available: ``Y / obs_scale`` is a
standard Brownian motion and X has drift ``b - alpha * h / obs_scale``.

All coefficient callables are vectorized over leading axes: a state array has
shape ``(..., d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .rng import as_factory

_RATIO_TOL = 1e-9


class ModelError(ValueError):
    """Invalid model parameters or a numerical blow-up of the coefficients."""


# ---------------------------------------------------------------------------
# grids and path containers


@dataclass(frozen=True)
class SimGrid:
    """Exercise dates every ``dt_exercise``; observations/mutations every
    ``delta_obs``, each split into ``substeps`` Euler steps."""

    T: float
    dt_exercise: float
    delta_obs: float
    substeps: int | None = None

    def __post_init__(self):
        if not (self.T > 0 and self.dt_exercise > 0 and self.delta_obs > 0):
            raise ModelError("T, dt_exercise and delta_obs must be positive")
        for num, den, what in ((self.T, self.dt_exercise, "T / dt_exercise"),
                               (self.dt_exercise, self.delta_obs, "dt_exercise / delta_obs")):
            q = num / den
            if abs(q - round(q)) > _RATIO_TOL * max(1.0, q) or round(q) < 1:
                raise ModelError(f"{what} = {q!r} is not a positive integer")
        if self.substeps is None:
            object.__setattr__(self, "substeps", max(1, math.ceil(self.delta_obs / 0.01 - 1e-9)))
        if int(self.substeps) < 1:
            raise ModelError("substeps must be >= 1")
        object.__setattr__(self, "substeps", int(self.substeps))

    @property
    def M(self) -> int:
        """Number of exercise intervals."""
        return int(round(self.T / self.dt_exercise))

    @property
    def obs_per_exercise(self) -> int:
        return int(round(self.dt_exercise / self.delta_obs))

    @property
    def n_obs(self) -> int:
        """Number of observation intervals on [0, T]."""
        return self.M * self.obs_per_exercise

    @property
    def n_sub(self) -> int:
        """Total number of Euler substeps on [0, T]."""
        return self.n_obs * self.substeps

    @property
    def h(self) -> float:
        """Euler substep length."""
        return self.delta_obs / self.substeps

    def exercise_times(self) -> np.ndarray:
        return np.arange(self.M + 1) * self.dt_exercise

    def sub_times(self) -> np.ndarray:
        return np.arange(self.n_sub + 1) * self.h


@dataclass
class PathSample:
    times: np.ndarray
    y: np.ndarray                 # (len(times), d_y)
    x: np.ndarray | None = None   # (len(times), d) under the physical measure only


# ---------------------------------------------------------------------------
# initial laws


@dataclass(frozen=True)
class InitialLaw:
    """One-dimensional law of X_0: ``gaussian``, ``uniform``, ``two_point`` or ``dirac``."""

    kind: str
    params: tuple[float, ...]

    def __post_init__(self):
        n_expected = {"gaussian": 2, "uniform": 2, "two_point": 3, "dirac": 1}
        if self.kind not in n_expected:
            raise ModelError(f"unknown initial law {self.kind!r}")
        if len(self.params) != n_expected[self.kind]:
            raise ModelError(f"{self.kind} law takes {n_expected[self.kind]} parameters")
        if self.kind == "gaussian" and self.params[1] < 0:
            raise ModelError("gaussian std must be nonnegative")
        if self.kind == "uniform" and not self.params[0] < self.params[1]:
            raise ModelError("uniform law needs low < high")
        if self.kind == "two_point" and not 0.0 <= self.params[2] <= 1.0:
            raise ModelError("two-point weight must lie in [0, 1]")

    @classmethod
    def gaussian(cls, mean: float, std: float) -> "InitialLaw":
        return cls("gaussian", (float(mean), float(std)))

    @classmethod
    def uniform(cls, low: float, high: float) -> "InitialLaw":
        return cls("uniform", (float(low), float(high)))

    @classmethod
    def two_point(cls, left: float, right: float, p_right: float = 0.5) -> "InitialLaw":
        return cls("two_point", (float(left), float(right), float(p_right)))

    @classmethod
    def dirac(cls, x: float) -> "InitialLaw":
        return cls("dirac", (float(x),))

    @property
    def mean(self) -> float:
        p = self.params
        if self.kind == "gaussian":
            return p[0]
        if self.kind == "uniform":
            return 0.5 * (p[0] + p[1])
        if self.kind == "two_point":
            return (1 - p[2]) * p[0] + p[2] * p[1]
        return p[0]

    @property
    def variance(self) -> float:
        p = self.params
        if self.kind == "gaussian":
            return p[1] ** 2
        if self.kind == "uniform":
            return (p[1] - p[0]) ** 2 / 12.0
        if self.kind == "two_point":
            return p[2] * (1 - p[2]) * (p[1] - p[0]) ** 2
        return 0.0

    @property
    def is_gaussian(self) -> bool:
        """Gaussian in the wide sense (Dirac = zero-variance Gaussian)."""
        return self.kind in ("gaussian", "dirac")

    def sample(self, gen: np.random.Generator, size: int) -> np.ndarray:
        """Draw ``size`` points, shape ``(size, 1)``."""
        p = self.params
        if self.kind == "gaussian":
            out = p[0] + p[1] * gen.standard_normal(size)
        elif self.kind == "uniform":
            out = p[0] + (p[1] - p[0]) * gen.random(size)
        elif self.kind == "two_point":
            out = np.where(gen.random(size) < p[2], p[1], p[0])
        else:
            out = np.full(size, p[0])
        return np.asarray(out, dtype=float).reshape(size, 1)

    def describe(self) -> str:
        return f"{self.kind}({', '.join(f'{v:g}' for v in self.params)})"


# ---------------------------------------------------------------------------
# the model


@dataclass(frozen=True)
class DiffusionModel:
    d: int
    d_y: int
    d_w: int
    b: Callable[[np.ndarray], np.ndarray]
    alpha: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]
    obs_vol: Callable[[np.ndarray], np.ndarray]
    reward: Callable[[np.ndarray, np.ndarray], np.ndarray]
    discount_rate: float = 0.0
    obs_scale: float | None = None
    family: str | None = None
    params: Any = None
    name: str = "custom"
    _meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if min(self.d, self.d_y, self.d_w) < 1:
            raise ModelError("dimensions must be positive")
        if self.discount_rate < 0:
            raise ModelError("discount rate must be nonnegative")
        if self.obs_scale is not None and not self.obs_scale > 0:
            raise ModelError("obs_scale must be positive")

    @property
    def has_reference_measure(self) -> bool:
        return self.obs_scale is not None

    def payoff(self, t, x, y) -> np.ndarray:
        """Discounted reward ``exp(-r t) g(x, y)``."""
        return np.exp(-self.discount_rate * np.asarray(t)) * self.reward(x, y)

    def h_normalized(self, x: np.ndarray) -> np.ndarray:
        if self.obs_scale is None:
            raise ModelError(f"model {self.name!r} has state-dependent observation noise; "
                             "no reference measure is available")
        return self.h(x) / self.obs_scale

    def drift(self, x: np.ndarray, mode: str = "physical") -> np.ndarray:
        b = self.b(x)
        if mode == "physical":
            return b
        if mode == "reference":
            return b - np.einsum("...ij,...j->...i", self.alpha(x), self.h_normalized(x))
        raise ValueError(f"drift_mode must be 'physical' or 'reference', got {mode!r}")

    def check_coefficients(self, x: np.ndarray) -> None:
        """Assert shape and finiteness of every coefficient at states ``x``."""
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        expected = {
            "b": (self.b(x), lead + (self.d,)),
            "alpha": (self.alpha(x), lead + (self.d, self.d_y)),
            "sigma": (self.sigma(x), lead + (self.d, self.d_w)),
            "h": (self.h(x), lead + (self.d_y,)),
            "obs_vol": (self.obs_vol(x), lead + (self.d_y,)),
        }
        for name, (val, shape) in expected.items():
            val = np.asarray(val)
            if val.shape != shape:
                raise ModelError(f"{name} returned shape {val.shape}, expected {shape}")
            if not np.all(np.isfinite(val)):
                raise ModelError(f"{name} is not finite at some state")


def euler_step(model: DiffusionModel, state, drift_mode: str, dy, dw, h_step: float) -> np.ndarray:
    """One Euler step of X.

    ``dy`` is the increment of the (normalized) observation in reference mode
    and the observation-noise increment ``dU`` in physical mode.
    """
    if h_step < 0:
        raise ValueError("h_step must be nonnegative")
    x = np.asarray(state, dtype=float)
    dy = np.asarray(dy, dtype=float)
    dw = np.asarray(dw, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = (x + model.drift(x, drift_mode) * h_step
               + np.einsum("...ij,...j->...i", model.alpha(x), dy)
               + np.einsum("...ij,...j->...i", model.sigma(x), dw))
    if not np.all(np.isfinite(out)):
        raise ModelError(f"non-finite state after Euler step of model {model.name!r}; "
                         "check the coefficient functions")
    return out


# ---------------------------------------------------------------------------
# path simulation


def observation_increments(grid: SimGrid, d_y: int, n_paths: int, rng, scale: float = 1.0,
                           start: int = 0) -> np.ndarray:
    """Brownian increments under the reference measure, shape ``(n_paths, n_sub, d_y)``.

    Path ``k`` uses stream ``("obs", start + k)``.
    """
    streams = as_factory(rng)
    sq = math.sqrt(grid.h) * scale
    out = np.empty((n_paths, grid.n_sub, d_y))
    for k in range(n_paths):
        out[k] = streams.generator("obs", start + k).standard_normal((grid.n_sub, d_y))
    out *= sq
    return out


def simulate_observation_paths(grid: SimGrid, d_y: int, y0, N: int, rng,
                               scale: float = 1.0) -> list[PathSample]:
    if N < 1:
        raise ValueError("N must be >= 1")
    y0 = np.broadcast_to(np.asarray(y0, dtype=float), (d_y,))
    dy = observation_increments(grid, d_y, N, rng, scale=scale)
    times = grid.sub_times()
    paths = []
    for k in range(N):
        y = np.empty((grid.n_sub + 1, d_y))
        y[0] = y0
        np.cumsum(dy[k], axis=0, out=y[1:])
        y[1:] += y0
        paths.append(PathSample(times=times, y=y))
    return paths


def joint_path_arrays(model: DiffusionModel, grid: SimGrid, x0_sampler: InitialLaw, y0,
                      n_paths: int, rng, start: int = 0):
    """Euler paths of (X, Y) under the physical measure.

    Returns ``times, x, y`` with ``x`` of shape ``(n_paths, n_sub + 1, d)`` and
    ``y`` of shape ``(n_paths, n_sub + 1, d_y)``.
    """
    streams = as_factory(rng)
    S, h = grid.n_sub, grid.h
    sq = math.sqrt(h)
    dY = model.d_y
    x = np.empty((n_paths, S + 1, model.d))
    y = np.empty((n_paths, S + 1, dY))
    noise = np.empty((n_paths, S, dY + model.d_w))
    for k in range(n_paths):
        x[k, 0] = x0_sampler.sample(streams.generator("state_init", start + k), 1)[0]
        noise[k] = streams.generator("state", start + k).standard_normal((S, dY + model.d_w))
    noise *= sq
    y[:, 0] = np.broadcast_to(np.asarray(y0, dtype=float), (dY,))
    for i in range(S):
        xi = x[:, i]
        du = noise[:, i, :dY]
        dw = noise[:, i, dY:]
        y[:, i + 1] = y[:, i] + model.h(xi) * h + model.obs_vol(xi) * du
        x[:, i + 1] = euler_step(model, xi, "physical", du, dw, h)
    return grid.sub_times(), x, y


def simulate_joint_paths(model: DiffusionModel, grid: SimGrid, x0_sampler: InitialLaw, y0,
                         N: int, rng) -> list[PathSample]:
    times, x, y = joint_path_arrays(model, grid, x0_sampler, y0, N, rng)
    return [PathSample(times=times, y=y[k], x=x[k]) for k in range(N)]


# ---------------------------------------------------------------------------
# the two worked examples


@dataclass(frozen=True)
class LinearGaussianParams:
    """Stochastic-drift example: X an OU drift of Y, payoff (Y (c1 + X) - c2)_+."""

    kappa: float = 2.0
    a: float = 0.05
    sigma_x: float = 0.3
    sigma_y: float = 0.1
    rho: float = 0.6
    r: float = 0.1
    c1: float = 1.0
    c2: float = 2.0
    T: float = 1.0

    def __post_init__(self):
        if not self.sigma_y > 0:
            raise ModelError("sigma_y must be positive")
        if self.sigma_x < 0:
            raise ModelError("sigma_x must be nonnegative")
        if abs(self.rho) > 1:
            raise ModelError("|rho| must be <= 1")
        if self.kappa < 0 or self.r < 0 or not self.T > 0:
            raise ModelError("kappa and r must be nonnegative, T positive")


@dataclass(frozen=True)
class SteinSteinParams:
    """Stochastic volatility X of the log-price Y, American put payoff."""

    kappa: float = 1.0
    sigma_bar: float = 0.15
    alpha: float = 0.1
    rho: float = 0.0
    r: float = 0.05
    K: float = 100.0
    T: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ModelError("alpha (vol of vol) must be positive")
        if abs(self.rho) > 1:
            raise ModelError("|rho| must be <= 1")
        if self.kappa < 0 or self.r < 0 or self.K < 0 or not self.T > 0:
            raise ModelError("kappa, r, K must be nonnegative, T positive")


def _const(value: float, shape_tail: tuple[int, ...]):
    def f(x):
        x = np.asarray(x)
        return np.full(x.shape[:-1] + shape_tail, value)
    return f


def linear_gaussian_model(params: LinearGaussianParams | None = None, **kwargs) -> DiffusionModel:
    p = params if params is not None else LinearGaussianParams(**kwargs)
    sx, sy, rho = p.sigma_x, p.sigma_y, p.rho

    def b(x):
        return -p.kappa * x

    def h(x):
        return x - p.a

    def reward(x, y):
        return np.maximum(y[..., 0] * (p.c1 + x[..., 0]) - p.c2, 0.0)

    return DiffusionModel(
        d=1, d_y=1, d_w=1,
        b=b,
        alpha=_const(rho * sx, (1, 1)),
        sigma=_const(math.sqrt(1.0 - rho * rho) * sx, (1, 1)),
        h=h,
        obs_vol=_const(sy, (1,)),
        reward=reward,
        discount_rate=p.r,
        obs_scale=sy,
        family="linear_gaussian",
        params=p,
        name="linear_gaussian",
    )


def stein_stein_model(params: SteinSteinParams | None = None, **kwargs) -> DiffusionModel:
    p = params if params is not None else SteinSteinParams(**kwargs)

    def b(x):
        return p.kappa * (p.sigma_bar - x)

    def h(x):
        return p.r - 0.5 * x * x

    def obs_vol(x):
        return np.asarray(x, dtype=float).copy()

    def reward(x, y):
        return np.maximum(p.K - np.exp(y[..., 0]), 0.0) * np.ones(np.shape(x)[:-1])

    return DiffusionModel(
        d=1, d_y=1, d_w=1,
        b=b,
        alpha=_const(p.rho * p.alpha, (1, 1)),
        sigma=_const(math.sqrt(1.0 - p.rho * p.rho) * p.alpha, (1, 1)),
        h=h,
        obs_vol=obs_vol,
        reward=reward,
        discount_rate=p.r,
        obs_scale=None,
        family="stein_stein",
        params=p,
        name="stein_stein",
    )
