"""Branching particle filter for the conditional law of X given Y.

Two weighting modes are supported.  In ``reference`` mode the observation is
a Brownian motion under the reference measure and each particle carries the
discrete likelihood weight ``exp(h(v) dY - |h(v)|^2 delta / 2)``.  In
``candidate`` mode (state-dependent observation noise) each particle
generates its own candidate observation and is weighted by a kernel of its
distance to the true one.  Particles are branched after every observation
interval with minimal-variance offspring counts.

The single-cloud operations below are the reference implementation; the
batch driver :func:`filter_summaries` runs many paths at once through the
compiled kernels or their numpy fallback.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.integrate import quad

from . import _kernels
from ._kernels.fallback import CollapseSignal, parent_indices, systematic_offspring
from .kalman import gauss_hermite_coefficients, hermite_rule, terminal_payoff_expectation
from .model import DiffusionModel, InitialLaw, SimGrid, joint_path_arrays, observation_increments
from .rng import as_factory

LOG_TINY = -745.0            # exp() underflows to 0 below this
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

__all__ = [
    "BranchingOutcome", "FilterCollapseError", "FilterSummaries", "KernelSpec", "ParticleCloud",
    "apply_state_constraints", "branch", "estimate_pi", "estimate_rho", "filter_summaries",
    "filter_trace", "init_cloud", "propagate", "systematic_offspring", "update_weights_candidate",
    "update_weights_discrete", "write_trace_csv",
]


class FilterCollapseError(RuntimeError):
    """All particle weights vanished."""


# ---------------------------------------------------------------------------
# types


@dataclass
class ParticleCloud:
    """Weighted particles: ``locations`` (n, d), ``log_weights`` (n,)."""

    locations: np.ndarray
    log_weights: np.ndarray
    log_normalizer: float = 0.0
    t: float = 0.0

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=float)
        if self.locations.ndim == 1:
            self.locations = self.locations[:, None]
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        if self.log_weights.shape != (self.n,):
            raise ValueError("one weight per particle required")

    @property
    def n(self) -> int:
        return self.locations.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def normalized_weights(self) -> np.ndarray:
        w = np.exp(self.log_weights - self.log_weights.max())
        return w / w.sum()

    def log_mass(self) -> float:
        """log of (1/n) sum_j a_j."""
        mx = self.log_weights.max()
        return float(mx + math.log(np.exp(self.log_weights - mx).sum() / self.n))

    def ess(self) -> float:
        """Effective sample size (sum a)^2 / sum a^2."""
        w = self.normalized_weights
        return float(1.0 / np.sum(w * w))


@dataclass(frozen=True)
class BranchingOutcome:
    offspring: np.ndarray       # (n,) counts o_j
    parent_map: np.ndarray      # (n,) parent index of every new slot


@dataclass(frozen=True)
class KernelSpec:
    """Smooth unit-mass density used to weight candidate observations.

    ``logpdf`` must be vectorized.  The default is the standard Gaussian.
    The bandwidth is ``n ** -bandwidth_exponent``.
    """

    logpdf: Callable[[np.ndarray], np.ndarray] | None = None
    bandwidth_exponent: float = 1.0 / 3.0
    name: str = "gaussian"

    def __post_init__(self):
        if self.logpdf is not None:
            mass, _ = quad(lambda z: math.exp(float(self.logpdf(np.asarray(z)))), -np.inf, np.inf)
            if not abs(mass - 1.0) < 1e-6:
                raise ValueError(f"kernel must integrate to 1, got {mass:.8f}")

    @property
    def is_gaussian(self) -> bool:
        return self.logpdf is None

    def log_density(self, z: np.ndarray) -> np.ndarray:
        if self.logpdf is None:
            return -0.5 * np.square(z) - _HALF_LOG_2PI
        return np.asarray(self.logpdf(z), dtype=float)

    def scale(self, n: int) -> float:
        """Inverse bandwidth ``n ** exponent``."""
        return float(n) ** self.bandwidth_exponent


# ---------------------------------------------------------------------------
# single-cloud operations


def init_cloud(n: int, x0_sampler: InitialLaw, gen: np.random.Generator) -> ParticleCloud:
    """n i.i.d. draws from the initial law with unit weights."""
    if n < 2:
        raise ValueError("need at least 2 particles")
    return ParticleCloud(locations=x0_sampler.sample(gen, n), log_weights=np.zeros(n))


def propagate(cloud: ParticleCloud, model: DiffusionModel, h_step: float, gen: np.random.Generator, *,
              dy=None, substeps: int = 1, mode: str = "reference", y_start=None):
    """Move the particles across one observation interval of length ``h_step``.

    In ``reference`` mode ``dy`` holds the raw observation increments of the
    ``substeps`` Euler steps, shape ``(substeps, d_y)``, and the cloud is
    returned.  In ``candidate`` mode each particle also integrates its own
    observation from ``y_start`` and ``(cloud, candidates)`` is returned.
    """
    hs = h_step / substeps
    sqh = math.sqrt(hs)
    v = cloud.locations
    n = cloud.n
    if mode == "reference":
        dy = np.asarray(dy, dtype=float).reshape(substeps, model.d_y) / model.obs_scale
        noise = gen.standard_normal((substeps, n, model.d_w))
        for i in range(substeps):
            v = _checked_step(model, v, "reference", dy[i], sqh * noise[i], hs)
        return replace(cloud, locations=v, t=cloud.t + h_step)
    if mode == "candidate":
        dY = model.d_y
        yc = np.broadcast_to(np.asarray(y_start, dtype=float), (n, dY)).copy()
        noise = gen.standard_normal((substeps, n, dY + model.d_w))
        for i in range(substeps):
            du = sqh * noise[i, :, :dY]
            dw = sqh * noise[i, :, dY:]
            x = v
            yc = yc + model.h(x) * hs + model.obs_vol(x) * du
            v = _checked_step(model, x, "physical", du, dw, hs)
        return replace(cloud, locations=v, t=cloud.t + h_step), yc
    raise ValueError(f"mode must be 'reference' or 'candidate', got {mode!r}")


def _checked_step(model, v, mode, dy, dw, hs):
    x = np.asarray(v, dtype=float)
    dy = np.broadcast_to(dy, x.shape[:-1] + (model.d_y,))
    out = (x + model.drift(x, mode) * hs
           + np.einsum("...ij,...j->...i", model.alpha(x), dy)
           + np.einsum("...ij,...j->...i", model.sigma(x), dw))
    bad = ~np.all(np.isfinite(out), axis=-1)
    if bad.any():
        raise FloatingPointError(f"non-finite particle location (particle {int(np.flatnonzero(bad)[0])})")
    return out


def update_weights_discrete(cloud: ParticleCloud, model: DiffusionModel, dy, delta: float) -> ParticleCloud:
    """Multiply the weights by the discrete likelihood of the raw increment ``dy``.

    ``h`` is evaluated at the current (interval-start) locations.
    """
    dyn = np.asarray(dy, dtype=float).reshape(model.d_y) / model.obs_scale
    hv = model.h_normalized(cloud.locations)
    la = cloud.log_weights + hv @ dyn - 0.5 * delta * np.sum(hv * hv, axis=-1)
    return replace(cloud, log_weights=la)


def update_weights_candidate(cloud: ParticleCloud, candidates, y_obs, kernel: KernelSpec | None = None) -> ParticleCloud:
    """Set the weights to ``n^(1/3) phi(n^(1/3) (Y_j - Y))`` (product over components)."""
    kernel = kernel or KernelSpec()
    bw = kernel.scale(cloud.n)
    dev = bw * (np.asarray(candidates, dtype=float).reshape(cloud.n, -1) - np.asarray(y_obs, dtype=float))
    la = (math.log(bw) + kernel.log_density(dev)).sum(axis=-1)
    if not la.max() >= LOG_TINY:
        raise FilterCollapseError("all candidate weights underflowed; increase the particle count "
                                  "or use a wider kernel")
    return replace(cloud, log_weights=la)


def branch(cloud: ParticleCloud, gen: np.random.Generator) -> tuple[ParticleCloud, BranchingOutcome]:
    """Minimal-variance branching; weights reset to one."""
    u = gen.random()
    n = cloud.n
    la = cloud.log_weights
    mx = la.max()
    s = np.cumsum(np.exp(la - mx))[-1]
    counts = systematic_offspring(la[None, :], np.array([u]))[0]
    floor = np.floor((n * np.exp(la - mx)) / s)
    extra = counts - floor
    if counts.sum() != n or np.any((extra != 0) & (extra != 1)):
        raise AssertionError("branching invariant violated")
    parents = parent_indices(counts[None, :])[0]
    new = ParticleCloud(locations=cloud.locations[parents], log_weights=np.zeros(n),
                        log_normalizer=cloud.log_normalizer + float(mx + math.log(s / n)), t=cloud.t)
    return new, BranchingOutcome(offspring=counts, parent_map=parents)


def _eval(f, cloud: ParticleCloud) -> np.ndarray:
    val = np.asarray(f(cloud.locations), dtype=float)
    return np.broadcast_to(val.reshape(val.shape[:1]) if val.ndim else val, (cloud.n,))


def estimate_pi(cloud: ParticleCloud, f) -> float:
    """Normalized estimate ``sum_j abar_j f(v_j)``; ``f`` maps (n, d) -> (n,)."""
    return float(np.dot(cloud.normalized_weights, _eval(f, cloud)))


def estimate_rho(cloud: ParticleCloud, f) -> float:
    """Unnormalized estimate ``exp(log_normalizer) (1/n) sum_j a_j f(v_j)``."""
    mx = cloud.log_weights.max()
    w = np.exp(cloud.log_weights - mx)
    return float(math.exp(cloud.log_normalizer + mx) * np.dot(w, _eval(f, cloud)) / cloud.n)


def apply_state_constraints(cloud: ParticleCloud, feasible) -> ParticleCloud:
    """Give particles outside the feasible set zero weight (they get no offspring)."""
    ok = np.asarray(feasible(cloud.locations), dtype=bool).reshape(cloud.n)
    if not ok.any():
        raise FilterCollapseError("no particle satisfies the state constraints")
    if ok.all():
        return cloud
    la = np.where(ok, cloud.log_weights, -np.inf)
    return replace(cloud, log_weights=la)


# ---------------------------------------------------------------------------
# batch driver


def _standard_functional(name: str, model: DiffusionModel, T: float, eur_order: int):
    if name == "x":
        return lambda t, x, y: x[..., 0]
    if name == "x2":
        return lambda t, x, y: x[..., 0] ** 2
    if name == "g":
        return lambda t, x, y: model.payoff(t, x, y)
    if name == "eur":
        if model.family != "linear_gaussian":
            raise ValueError("the 'eur' functional needs the linear-Gaussian model")
        p = model.params

        def eur(t, x, y):
            tau = max(T - float(t), 0.0)
            val = terminal_payoff_expectation(p, tau, x[..., 0], y[..., 0], order=eur_order)
            return math.exp(-p.r * tau) * val
        return eur
    raise ValueError(f"unknown functional {name!r}")


@dataclass
class FilterSummaries:
    """Filter output at the exercise dates for a batch of paths.

    ``moments[name]`` holds normalized estimates ``pi_t f`` of shape
    ``(N, M + 1)``; ``log_rho1`` the log total unnormalized mass.
    """

    times: np.ndarray
    y: np.ndarray                           # (N, M + 1, d_y)
    log_rho1: np.ndarray                    # (N, M + 1)
    moments: dict[str, np.ndarray]
    mode: str
    backend: str
    x_true: np.ndarray | None = None        # (N, M + 1, d), candidate mode only
    meta: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.log_rho1.shape[0]

    def rho(self, name: str) -> np.ndarray:
        return np.exp(self.log_rho1) * self.moments[name]

    def pi(self, name: str) -> np.ndarray:
        return self.moments[name]


_LG_NAMES = ("x", "x2", "g", "eur")
_SS_NAMES = ("x", "x2", "g")


def _eur_table(model: DiffusionModel, times: np.ndarray, T: float) -> np.ndarray:
    p = model.params
    tab = np.zeros((len(times), 7))
    for e, t in enumerate(times):
        tau = max(T - float(t), 0.0)
        tab[e, 6] = math.exp(-p.r * tau)
        if tau <= 0:
            tab[e, 0] = 1.0
            continue
        ex, ey, sy, beta, sc = gauss_hermite_coefficients(p, tau)
        tab[e, :6] = (ex, ey, p.a * tau, sy, beta, sc)
    return tab


def filter_summaries(model: DiffusionModel, grid: SimGrid, x0_law: InitialLaw, n: int, y0, N: int, rng, *,
                     functionals: Sequence[str] | Mapping[str, Callable] = ("x", "x2", "g"),
                     mode: str | None = None, kernel: KernelSpec | None = None,
                     backend: str | None = None, start: int = 0, chunk: int = 256,
                     eur_order: int = 12) -> FilterSummaries:
    """Run the particle filter along ``N`` observation paths.

    In ``reference`` mode the observation paths are Brownian under the
    reference measure (stream ``obs``); in ``candidate`` mode they are joint
    (X, Y) paths under the physical measure (streams ``state``/``state_init``).
    Path ``k`` uses streams indexed ``start + k`` throughout, so results for a
    path do not depend on ``N`` or on ``chunk``.

    ``functionals`` are names among ``x, x2, g, eur`` or a mapping from names
    to callables ``f(t, x, y)`` with ``x`` of shape ``(B, n, d)`` and ``y`` of
    shape ``(B, 1, d_y)`` returning ``(B, n)``.
    """
    if n < 2:
        raise ValueError("need at least 2 particles")
    if N < 1:
        raise ValueError("N must be >= 1")
    streams = as_factory(rng)
    mode = mode or ("reference" if model.has_reference_measure else "candidate")
    if mode not in ("reference", "candidate"):
        raise ValueError(f"unknown filter mode {mode!r}")
    if mode == "reference" and not model.has_reference_measure:
        raise ValueError(f"model {model.name!r} has no reference measure; use candidate mode")
    kernel = kernel or KernelSpec()
    if isinstance(functionals, Mapping):
        names = list(functionals)
        funcs = list(functionals.values())
    else:
        names = list(functionals)
        funcs = [_standard_functional(nm, model, grid.T, eur_order) for nm in names]
    if len(set(names)) != len(names):
        raise ValueError("duplicate functional names")
    backend = _kernels.resolve(backend)
    builtin = not isinstance(functionals, Mapping)
    compiled = None
    if backend == "compiled" and builtin and model.d == 1:
        if mode == "reference" and model.family == "linear_gaussian" and set(names) <= set(_LG_NAMES):
            compiled = "lg"
        elif mode == "candidate" and model.family == "stein_stein" and kernel.is_gaussian \
                and set(names) <= set(_SS_NAMES):
            compiled = "ss"
    used_backend = "compiled" if compiled else "python"

    times = grid.exercise_times()
    M, ope, sub = grid.M, grid.obs_per_exercise, grid.substeps
    y0 = np.broadcast_to(np.asarray(y0, dtype=float), (model.d_y,))
    y_ex = np.empty((N, M + 1, model.d_y))
    log_rho1 = np.empty((N, M + 1))
    moments = {nm: np.empty((N, M + 1)) for nm in names}
    x_true = np.empty((N, M + 1, model.d)) if mode == "candidate" else None
    if compiled == "lg":
        eur_tab = _eur_table(model, times, grid.T) if "eur" in names else np.zeros((M + 1, 7))
        gh_z, gh_w = hermite_rule(eur_order)
        p = model.params
        alpha = p.rho * p.sigma_x
        coef = np.array([alpha * p.a / p.sigma_y, -p.kappa - alpha / p.sigma_y, alpha,
                         math.sqrt(1.0 - p.rho ** 2) * p.sigma_x, -p.a / p.sigma_y, 1.0 / p.sigma_y,
                         p.r, p.c1, p.c2])
    elif compiled == "ss":
        p = model.params
        coef = np.array([p.kappa, p.sigma_bar, p.alpha, p.rho, p.r, p.K])

    for lo in range(0, N, chunk):
        hi = min(N, lo + chunk)
        B = hi - lo
        idx = range(start + lo, start + hi)
        v0 = np.stack([x0_law.sample(streams.generator("init", k), n) for k in idx])
        mut = [streams.generator("mutation", k) for k in idx]
        brg = [streams.generator("branch", k) for k in idx]
        if mode == "reference":
            dy = observation_increments(grid, model.d_y, B, streams, scale=model.obs_scale, start=start + lo)
            ycum = np.concatenate([np.zeros((B, 1, model.d_y)), np.cumsum(dy, axis=1)], axis=1) + y0
            yb = ycum[:, ::ope * sub]
            if compiled == "lg":
                stats = np.empty((B, M + 1, 4))
                lr = np.empty((B, M + 1))
                _kernels._core.lg_reference_filter(
                    np.ascontiguousarray(v0[..., 0]), np.ascontiguousarray(dy[..., 0] / model.obs_scale),
                    mut, brg, sub, ope, grid.delta_obs, coef, np.ascontiguousarray(yb[..., 0]), times,
                    "eur" in names, eur_tab, gh_z, gh_w, stats, lr)
                cols = [_LG_NAMES.index(nm) for nm in names]
                stats = stats[..., cols]
            else:
                stats, lr = _kernels.fallback.reference_filter(
                    model, v0, dy, mut, brg, substeps=sub, obs_per_ex=ope, delta=grid.delta_obs,
                    y_ex=yb, times_ex=times, functionals=funcs)
        else:
            _, xs, ys = joint_path_arrays(model, grid, x0_law, y0, B, streams, start=start + lo)
            y_obs = ys[:, ::sub]
            yb = y_obs[:, ::ope]
            x_true[lo:hi] = xs[:, ::ope * sub]
            bw = kernel.scale(n)
            try:
                if compiled == "ss":
                    stats = np.empty((B, M + 1, 3))
                    lr = np.empty((B, M + 1))
                    status = _kernels._core.ss_candidate_filter(
                        np.ascontiguousarray(v0[..., 0]), np.ascontiguousarray(y_obs[..., 0]), mut, brg,
                        sub, ope, grid.h, coef, bw, times, stats, lr)
                    if status >= 0:
                        raise CollapseSignal(status)
                    stats = stats[..., [_SS_NAMES.index(nm) for nm in names]]
                else:
                    stats, lr = _kernels.fallback.candidate_filter(
                        model, v0, y_obs, mut, brg, substeps=sub, obs_per_ex=ope, hs=grid.h,
                        kernel_logpdf=kernel.log_density, bw=bw, times_ex=times, functionals=funcs)
            except CollapseSignal as exc:
                raise FilterCollapseError(
                    f"filter collapse on path {start + lo + exc.path}: every candidate weight underflowed; "
                    f"increase the particle count (n={n}) or use a wider kernel") from None
        y_ex[lo:hi] = yb
        log_rho1[lo:hi] = lr
        for f, nm in enumerate(names):
            moments[nm][lo:hi] = stats[..., f]
    if not (np.all(np.isfinite(log_rho1)) and all(np.all(np.isfinite(m)) for m in moments.values())):
        raise FloatingPointError("non-finite filter estimate")
    return FilterSummaries(times=times, y=y_ex, log_rho1=log_rho1, moments=moments, mode=mode,
                           backend=used_backend, x_true=x_true,
                           meta={"n": n, "N": N, "start": start, "kernel": kernel.name})


# ---------------------------------------------------------------------------
# single-path trace


def filter_trace(model: DiffusionModel, grid: SimGrid, x0_law: InitialLaw, n: int, y0, rng, *,
                 path: int = 0, mode: str | None = None, kernel: KernelSpec | None = None) -> list[dict]:
    """Step-by-step filter state along one path using the single-cloud operations.

    Consumes the same streams as :func:`filter_summaries` for path ``path``;
    one row per observation date with ``t, pi_x, pi_x2, ess, log_rho1``.
    """
    streams = as_factory(rng)
    mode = mode or ("reference" if model.has_reference_measure else "candidate")
    kernel = kernel or KernelSpec()
    sub, delta = grid.substeps, grid.delta_obs
    y0 = np.broadcast_to(np.asarray(y0, dtype=float), (model.d_y,))
    cloud = init_cloud(n, x0_law, streams.generator("init", path))
    mut = streams.generator("mutation", path)
    brg = streams.generator("branch", path)
    if mode == "reference":
        dy = observation_increments(grid, model.d_y, 1, streams, scale=model.obs_scale, start=path)[0]
    else:
        _, _, ys = joint_path_arrays(model, grid, x0_law, y0, 1, streams, start=path)
        y_obs = ys[0, ::sub]
    rows = []

    def row(t):
        rows.append({"t": t, "pi_x": estimate_pi(cloud, lambda x: x[:, 0]),
                     "pi_x2": estimate_pi(cloud, lambda x: x[:, 0] ** 2), "ess": cloud.ess(),
                     "log_rho1": cloud.log_normalizer + cloud.log_mass()})

    row(0.0)
    for l in range(grid.n_obs):
        if l > 0:
            cloud, _ = branch(cloud, brg)
        if mode == "reference":
            block = dy[l * sub:(l + 1) * sub]
            cloud = update_weights_discrete(cloud, model, block.sum(axis=0), delta)
            cloud = propagate(cloud, model, delta, mut, dy=block, substeps=sub, mode="reference")
        else:
            cloud, yc = propagate(cloud, model, delta, mut, substeps=sub, mode="candidate", y_start=y_obs[l])
            cloud = update_weights_candidate(cloud, yc, y_obs[l + 1], kernel)
        row((l + 1) * delta)
    return rows


def write_trace_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["t", "pi_x", "pi_x2", "ess", "log_rho1"])
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) for k, v in r.items()})
