"""Regression Monte Carlo for Bermudan stopping on filter states.

Exercise dates are indexed ``e = 0..M``.  The forward pass (see
:func:`pobstop.pfilter.filter_summaries`) produces per-path basis features
``F[k, e, :]`` and immediate rewards ``G[k, e]``; the backward pass regresses
realized cashflows (Longstaff-Schwartz) or carried values (Tsitsiklis-van Roy)
on the features date by date.  All rewards are already discounted to time 0.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from scipy.special import ndtr

from .kalman import KalmanState, conditional_payoff, hermite_rule, terminal_payoff_expectation
from .model import DiffusionModel, euler_step
from .pfilter import FilterSummaries, ParticleCloud, estimate_pi, estimate_rho
from .rng import as_factory


class RankWarning(UserWarning):
    """Dependent regression columns were dropped."""


# ---------------------------------------------------------------------------
# basis functions


@dataclass(frozen=True)
class Feature:
    """One regression feature.

    kind ``const``: the constant 1.  ``obs``: ``fn(t, y)`` of the observation.
    ``rho`` / ``pi``: unnormalized / normalized filter estimate of the named
    functional (``x``, ``x2``, ``g`` or ``eur``).  ``moments``:
    ``fn(t, y, *m)`` where ``m`` are the normalized estimates of the
    functionals named in ``uses``.
    """

    name: str
    kind: str
    functional: str | None = None
    fn: Callable | None = None
    uses: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("const", "obs", "rho", "pi", "moments"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind in ("rho", "pi") and not self.functional:
            raise ValueError(f"feature {self.name!r} needs a functional")
        if self.kind == "obs" and self.fn is None:
            raise ValueError(f"feature {self.name!r} needs fn(t, y)")
        if self.kind == "moments" and (self.fn is None or not self.uses):
            raise ValueError(f"feature {self.name!r} needs fn(t, y, *moments) and the functionals it uses")


@dataclass(frozen=True)
class BasisSet:
    features: tuple[Feature, ...]
    name: str = "custom"

    def __post_init__(self):
        if not self.features or self.features[0].kind != "const":
            raise ValueError("the first feature must be the constant")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")

    @property
    def r_basis(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def functionals(self) -> list[str]:
        """Filter functionals the forward pass must estimate (``g`` always included)."""
        out = ["g"]
        for f in self.features:
            for nm in (f.functional, *f.uses):
                if nm and nm not in out:
                    out.append(nm)
        return out


def _y(t, y):
    return y[..., 0]


def _y2(t, y):
    return y[..., 0] ** 2


def linear_gaussian_basis() -> BasisSet:
    """{1, y, y^2, rho x, rho g, rho EUR}."""
    return BasisSet((
        Feature("1", "const"),
        Feature("y", "obs", fn=_y),
        Feature("y2", "obs", fn=_y2),
        Feature("rho_x", "rho", "x"),
        Feature("rho_g", "rho", "g"),
        Feature("rho_eur", "rho", "eur"),
    ), name="linear_gaussian")


def expected_integrated_variance(params, t, m1, m2):
    """``E[int_t^T X_s^2 ds]`` for the Ornstein-Uhlenbeck volatility given ``E X_t = m1``, ``E X_t^2 = m2``."""
    p = params
    tau = np.maximum(p.T - np.asarray(t, dtype=float), 0.0)
    k, sb = p.kappa, p.sigma_bar
    if k > 0:
        e = np.exp(-k * tau)
        I1 = (1.0 - e) / k
        I2 = (1.0 - e * e) / (2.0 * k)
        grow = p.alpha ** 2 / (2.0 * k) * (tau - I2)
    else:
        I1 = I2 = tau
        grow = 0.5 * p.alpha ** 2 * tau * tau
    d = m1 - sb
    mean_sq = sb * sb * tau + 2.0 * sb * d * I1 + d * d * I2
    return mean_sq + grow + np.maximum(m2 - m1 * m1, 0.0) * I2


def averaged_put(params, t, y, m1, m2):
    """Discounted Black-Scholes put with total variance from :func:`expected_integrated_variance`."""
    p = params
    t = np.asarray(t, dtype=float)
    tau = np.maximum(p.T - t, 0.0)
    s2 = np.maximum(expected_integrated_variance(p, t, m1, m2), 1e-300)
    S = np.exp(y)
    sq = np.sqrt(s2)
    d1 = (np.log(S / p.K) + p.r * tau + 0.5 * s2) / sq
    v = p.K * np.exp(-p.r * tau) * ndtr(sq - d1) - S * ndtr(-d1)
    v = np.where(tau > 1e-12, v, np.maximum(p.K - S, 0.0))
    return np.exp(-p.r * t) * v


def stein_stein_basis(params, bs_put: bool = True) -> BasisSet:
    """{1, y, y^2, (K - e^y)_+, pi x, pi x^2} plus, with ``bs_put``, the
    put of :func:`averaged_put` at the filtered volatility moments."""
    K = params.K

    def put(t, y):
        return np.maximum(K - np.exp(y[..., 0]), 0.0)

    def bs(t, y, m1, m2):
        return averaged_put(params, t, y[..., 0], m1, m2)

    features = (
        Feature("1", "const"),
        Feature("y", "obs", fn=_y),
        Feature("y2", "obs", fn=_y2),
        Feature("payoff", "obs", fn=put),
        Feature("pi_x", "pi", "x"),
        Feature("pi_x2", "pi", "x2"),
    )
    if not bs_put:
        return BasisSet(features, name="stein_stein_plain")
    return BasisSet(features + (Feature("bs_put", "moments", fn=bs, uses=("x", "x2")),), name="stein_stein")


def default_basis(model: DiffusionModel) -> BasisSet:
    if model.family == "linear_gaussian":
        return linear_gaussian_basis()
    if model.family == "stein_stein":
        return stein_stein_basis(model.params)
    raise ValueError(f"no default basis for model {model.name!r}")


# ---------------------------------------------------------------------------
# European feature


def european_feature(t: float, x, y, model: DiffusionModel, *, T: float | None = None, order: int = 12,
                     n_inner: int = 20000, rng=0, h_step: float = 0.01):
    """``E[exp(-r (T - t)) g(X_T, Y_T) | X_t = x, Y_t = y]``.

    Closed-form Gaussian transition plus quadrature for the linear-Gaussian
    model; nested Euler Monte Carlo with ``n_inner`` paths otherwise (scalar
    ``x`` and ``y`` only).
    """
    if order < 2:
        raise ValueError("quadrature order must be >= 2")
    if model.family == "linear_gaussian":
        p = model.params
        T = p.T if T is None else T
        tau = max(T - t, 0.0)
        return math.exp(-p.r * tau) * terminal_payoff_expectation(p, tau, x, y, order=order)
    if T is None:
        T = getattr(model.params, "T", None)
        if T is None:
            raise ValueError("horizon T required for a custom model")
    return nested_mc_european(t, x, y, model, T=T, n_inner=n_inner, rng=rng, h_step=h_step)[0]


def nested_mc_european(t: float, x, y, model: DiffusionModel, *, T: float, n_inner: int, rng=0,
                       h_step: float = 0.01, index: int = 0):
    """Euler Monte Carlo estimate of the European feature; returns ``(mean, std_error)``."""
    gen = as_factory(rng).generator("oracle", index)
    tau = max(T - t, 0.0)
    steps = max(1, math.ceil(tau / h_step - 1e-9)) if tau > 0 else 0
    hs = tau / steps if steps else 0.0
    xs = np.tile(np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, model.d), (n_inner, 1))
    ys = np.tile(np.atleast_1d(np.asarray(y, dtype=float)).reshape(1, model.d_y), (n_inner, 1))
    sq = math.sqrt(hs)
    for _ in range(steps):
        z = gen.standard_normal((n_inner, model.d_y + model.d_w)) * sq
        du, dw = z[:, :model.d_y], z[:, model.d_y:]
        ys = ys + model.h(xs) * hs + model.obs_vol(xs) * du
        xs = euler_step(model, xs, "physical", du, dw, hs)
    vals = math.exp(-model.discount_rate * tau) * model.reward(xs, ys)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_inner))


# ---------------------------------------------------------------------------
# evaluation of features on a single state


def _kalman_moment(name: str, t: float, st: KalmanState, y: float, model: DiffusionModel, order: int):
    p = model.params
    if name == "x":
        return st.m
    if name == "x2":
        return st.m ** 2 + st.P
    if name == "g":
        return math.exp(-p.r * t) * float(conditional_payoff(st.m, st.P, y, p))
    if name == "eur":
        z, w = hermite_rule(order)
        xs = st.m + math.sqrt(st.P) * z
        return float(np.dot(w, european_feature(t, xs, y, model, order=order)))
    raise ValueError(f"unknown functional {name!r}")


def evaluate_basis(basis: BasisSet, t: float, state, y, model: DiffusionModel, *, order: int = 12) -> np.ndarray:
    """Feature vector at one (time, filter state, observation).

    ``state`` is a :class:`ParticleCloud` or a :class:`KalmanState`; for the
    latter the conditional law is exact and normalized, so ``rho`` and ``pi``
    features coincide.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    out = np.empty(basis.r_basis)
    for i, f in enumerate(basis.features):
        if f.kind == "const":
            val = 1.0
        elif f.kind == "obs":
            val = float(f.fn(t, y))
        elif f.kind == "moments":
            m = [_state_pi(nm, t, state, y, model, order) for nm in f.uses]
            val = float(f.fn(t, y, *m))
        elif isinstance(state, KalmanState):
            val = _kalman_moment(f.functional, t, state, float(y[0]), model, order)
        elif isinstance(state, ParticleCloud):
            fn = _cloud_functional(f.functional, t, y, model, order)
            val = estimate_rho(state, fn) if f.kind == "rho" else estimate_pi(state, fn)
        else:
            raise TypeError(f"unsupported filter state {type(state).__name__}")
        if not math.isfinite(val):
            raise FloatingPointError(f"feature {f.name!r} is not finite at t={t}")
        out[i] = val
    return out


def _state_pi(name, t, state, y, model, order):
    if isinstance(state, KalmanState):
        return _kalman_moment(name, t, state, float(y[0]), model, order)
    if isinstance(state, ParticleCloud):
        return estimate_pi(state, _cloud_functional(name, t, y, model, order))
    raise TypeError(f"unsupported filter state {type(state).__name__}")


def _cloud_functional(name, t, y, model, order):
    yy = np.asarray(y, dtype=float)
    if name == "x":
        return lambda x: x[:, 0]
    if name == "x2":
        return lambda x: x[:, 0] ** 2
    if name == "g":
        return lambda x: model.payoff(t, x, np.broadcast_to(yy, x.shape[:-1] + yy.shape))
    if name == "eur":
        return lambda x: european_feature(t, x[:, 0], yy[0], model, order=order)
    raise ValueError(f"unknown functional {name!r}")


def basis_matrix(basis: BasisSet, summ: FilterSummaries) -> tuple[np.ndarray, np.ndarray]:
    """Features ``(N, M + 1, r_basis)`` and rewards ``(N, M + 1)`` from a forward pass.

    Under the reference measure the reward is the unnormalized ``rho_t g``;
    under the physical measure it is ``pi_t g``.
    """
    N, M1 = summ.log_rho1.shape
    F = np.empty((N, M1, basis.r_basis))
    for i, f in enumerate(basis.features):
        if f.kind == "const":
            F[..., i] = 1.0
        elif f.kind == "obs":
            F[..., i] = f.fn(summ.times[None, :], summ.y)
        elif f.kind == "rho":
            F[..., i] = summ.rho(f.functional)
        elif f.kind == "moments":
            F[..., i] = f.fn(summ.times[None, :], summ.y, *(summ.pi(nm) for nm in f.uses))
        else:
            F[..., i] = summ.pi(f.functional)
        bad = ~np.isfinite(F[..., i])
        if bad.any():
            k = int(np.argwhere(bad)[0][0])
            raise FloatingPointError(f"feature {f.name!r} is not finite on path {k}")
    G = summ.rho("g") if summ.mode == "reference" else summ.pi("g")
    return F, G


# ---------------------------------------------------------------------------
# least squares


@dataclass
class LeastSquaresResult:
    coef: np.ndarray
    rank: int
    dropped: list[int]
    residual_norm: float
    condition: float


def least_squares_fit(A: np.ndarray, b: np.ndarray, names: Sequence[str] | None = None,
                      rtol: float | None = None) -> LeastSquaresResult:
    """Minimize ``|A c - b|`` by column-scaled QR with pivoting.

    Columns that are numerically dependent on earlier pivots get coefficient
    0 and a :class:`RankWarning`.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    N, r = A.shape
    if N < r:
        raise ValueError(f"need at least as many samples ({N}) as basis functions ({r})")
    norms = np.linalg.norm(A, axis=0)
    live = norms > 0
    scale = np.where(live, norms, 1.0)
    As = A / scale
    Q, R, piv = scipy.linalg.qr(As, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = (rtol if rtol is not None else max(N, r) * np.finfo(float).eps) * (diag[0] if r else 0.0)
    k = int(np.sum(diag > tol))
    keep = piv[:k]
    dropped = sorted(int(j) for j in piv[k:])
    coef = np.zeros(r)
    if k:
        sol = scipy.linalg.solve_triangular(R[:k, :k], Q[:, :k].T @ b)
        coef[keep] = sol / scale[keep]
    if dropped:
        label = [names[j] for j in dropped] if names is not None else dropped
        warnings.warn(f"dropped dependent regression columns {label}", RankWarning, stacklevel=2)
    resid = b - A @ coef
    cond = float(diag[0] / diag[k - 1]) if k else math.inf
    return LeastSquaresResult(coef=coef, rank=k, dropped=dropped,
                              residual_norm=float(np.linalg.norm(resid)), condition=cond)


# ---------------------------------------------------------------------------
# backward induction


@dataclass
class RegressionFit:
    """Continuation-value coefficients per exercise date (rows 0 and M unused)."""

    coef: np.ndarray                    # (M + 1, r_basis)
    residual_norm: np.ndarray           # (M + 1,)
    condition: np.ndarray               # (M + 1,)
    rank: np.ndarray                    # (M + 1,)
    basis_names: list[str]
    algo: str
    stop_at_zero: bool = False
    continuation_zero: float = float("nan")

    @property
    def M(self) -> int:
        return self.coef.shape[0] - 1

    def continuation(self, e: int, F: np.ndarray) -> np.ndarray:
        return np.asarray(F) @ self.coef[e]


@dataclass
class CashflowState:
    cashflow: np.ndarray        # (N,) realized discounted reward
    tau_index: np.ndarray       # (N,) exercise-date index of the stop


@dataclass
class ValueEstimate:
    value: float                # max(G0, mean continuation)
    std_error: float
    mean_cashflow: float        # (1/N) sum of theta at the first exercise date
    G0: float
    n_paths: int
    algo: str
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_inputs(F, G):
    F = np.asarray(F, dtype=float)
    G = np.asarray(G, dtype=float)
    if F.ndim != 3 or G.shape != F.shape[:2]:
        raise ValueError("features must be (N, M+1, r) and rewards (N, M+1)")
    if F.shape[1] < 2:
        raise ValueError("need at least two exercise dates")
    return F, G


def _empty_fit(M, r, names, algo):
    return RegressionFit(coef=np.zeros((M + 1, r)), residual_norm=np.zeros(M + 1),
                         condition=np.ones(M + 1), rank=np.zeros(M + 1, dtype=int),
                         basis_names=list(names), algo=algo)


def _regress(fit, e, F_e, target, names):
    res = least_squares_fit(F_e, target, names)
    fit.coef[e] = res.coef
    fit.residual_norm[e] = res.residual_norm
    fit.condition[e] = res.condition
    fit.rank[e] = res.rank
    return F_e @ res.coef


def _finish(fit, cont_paths, G, algo, meta):
    N = G.shape[0]
    G0 = float(np.mean(G[:, 0]))
    cont = float(np.mean(cont_paths))
    se = float(np.std(cont_paths, ddof=1) / math.sqrt(N)) if N > 1 else float("nan")
    fit.stop_at_zero = G0 >= cont
    fit.continuation_zero = cont
    return ValueEstimate(value=max(G0, cont), std_error=se, mean_cashflow=cont, G0=G0, n_paths=N,
                         algo=algo, meta=dict(meta or {}))


def backward_induction(F, G, names: Sequence[str] | None = None, meta: dict | None = None):
    """Longstaff-Schwartz recursion on realized cashflows.

    Returns ``(fit, cashflow_state, estimate)``.  Paths stop where the fitted
    continuation value is <= the immediate reward.  At date 0 all paths share
    the same information, so no regression is made: the value is
    ``max(G0, mean cashflow)``.
    """
    F, G = _check_inputs(F, G)
    N, M1, r = F.shape
    M = M1 - 1
    names = names or [f"f{i}" for i in range(r)]
    fit = _empty_fit(M, r, names, "ls")
    theta = G[:, M].copy()
    tau = np.full(N, M, dtype=int)
    for e in range(M - 1, 0, -1):
        q = _regress(fit, e, F[:, e], theta, names)
        stop = q <= G[:, e]
        theta = np.where(stop, G[:, e], theta)
        tau = np.where(stop, e, tau)
    est = _finish(fit, theta, G, "ls", meta)
    if fit.stop_at_zero:
        cash = CashflowState(cashflow=G[:, 0].copy(), tau_index=np.zeros(N, dtype=int))
    else:
        cash = CashflowState(cashflow=theta, tau_index=tau)
    return fit, cash, est


def tvr_backward_induction(F, G, names: Sequence[str] | None = None, meta: dict | None = None):
    """Tsitsiklis-van Roy recursion: regress ``max(G, q_hat)`` carried values.

    Returns ``(fit, estimate)``.
    """
    F, G = _check_inputs(F, G)
    N, M1, r = F.shape
    M = M1 - 1
    names = names or [f"f{i}" for i in range(r)]
    fit = _empty_fit(M, r, names, "tvr")
    V = G[:, M].copy()
    for e in range(M - 1, 0, -1):
        q = _regress(fit, e, F[:, e], V, names)
        V = np.maximum(G[:, e], q)
    return fit, _finish(fit, V, G, "tvr", meta)


# ---------------------------------------------------------------------------
# policies


@dataclass
class StoppingPolicy:
    """Stop at date ``e`` when the fitted continuation value is <= the reward."""

    fit: RegressionFit

    def continuation(self, e: int, F) -> np.ndarray:
        if e == 0:
            return np.full(np.shape(F)[:-1], self.fit.continuation_zero)
        if e == self.fit.M:
            return np.zeros(np.shape(F)[:-1])
        return self.fit.continuation(e, F)

    def decide(self, e: int, F, G) -> np.ndarray:
        """Boolean stop decisions for features ``F (..., r)`` and rewards ``G (...)``."""
        G = np.asarray(G, dtype=float)
        if e == self.fit.M:
            return np.ones(G.shape, dtype=bool)
        if e == 0:
            return np.full(G.shape, self.fit.stop_at_zero)
        return self.continuation(e, F) <= G

    __call__ = decide


def extract_policy(fit: RegressionFit) -> StoppingPolicy:
    return StoppingPolicy(fit)


def evaluate_policy(policy: StoppingPolicy, F, G, meta: dict | None = None) -> tuple[CashflowState, ValueEstimate]:
    """Value of following ``policy`` on (typically fresh) paths."""
    F, G = _check_inputs(F, G)
    N, M1, _ = F.shape
    M = M1 - 1
    G0 = float(np.mean(G[:, 0]))
    if policy.fit.stop_at_zero:
        cash = np.full(N, G0)
        tau = np.zeros(N, dtype=int)
    else:
        tau = np.full(N, M, dtype=int)
        alive = np.ones(N, dtype=bool)
        for e in range(1, M):
            stop = alive & policy.decide(e, F[:, e], G[:, e])
            tau[stop] = e
            alive &= ~stop
        cash = G[np.arange(N), tau]
    se = float(np.std(cash, ddof=1) / math.sqrt(N)) if N > 1 else float("nan")
    est = ValueEstimate(value=float(np.mean(cash)), std_error=se, mean_cashflow=float(np.mean(cash)),
                        G0=G0, n_paths=N, algo=policy.fit.algo + "-policy", meta=dict(meta or {}))
    return CashflowState(cashflow=cash, tau_index=tau), est


# ---------------------------------------------------------------------------
# CSV diagnostics


def write_fit_csv(fit: RegressionFit, times: np.ndarray, path) -> None:
    """One row per exercise date: coefficients, residual norm, condition, rank."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "t", *[f"coef_{n}" for n in fit.basis_names], "residual_norm", "condition", "rank"])
        for e in range(fit.M + 1):
            w.writerow([e, repr(float(times[e])), *[repr(float(c)) for c in fit.coef[e]],
                        repr(float(fit.residual_norm[e])), repr(float(fit.condition[e])), int(fit.rank[e])])


__all__ = [
    "BasisSet", "CashflowState", "Feature", "LeastSquaresResult", "RankWarning", "RegressionFit",
    "StoppingPolicy", "ValueEstimate", "averaged_put", "backward_induction", "basis_matrix", "default_basis",
    "european_feature", "expected_integrated_variance", "evaluate_basis", "evaluate_policy", "extract_policy", "least_squares_fit",
    "linear_gaussian_basis", "nested_mc_european", "stein_stein_basis", "tvr_backward_induction",
    "write_fit_csv",
]
