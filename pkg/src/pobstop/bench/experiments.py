"""Experiment drivers: single-config pricing, the two benchmark tables, the
filter convergence study and the stopping-region export."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .. import __version__, kalman, pde, rmc
from .._kernels import default_backend
from ..model import InitialLaw, euler_step, observation_increments
from ..pfilter import FilterSummaries, filter_summaries
from ..rng import as_factory
from .config import ConfigError, ExperimentConfig
from .io import ResultRow, ResultTable, write_rows_csv

EUROPEAN_BLOCK = 10000

# (label, law kind, law parameters, y0) for the linear-Gaussian table
TABLE1_ROWS = (
    ("N(0,0.05^2)", "gaussian", (0.0, 0.05), 2.0),
    ("N(-0.12,0.05^2)", "gaussian", (-0.12, 0.05), 2.24),
    ("N(0.2,0.05^2)", "gaussian", (0.2, 0.05), 1.8),
    ("N(0,0.1^2)", "gaussian", (0.0, 0.1), 2.0),
    ("delta_0", "dirac", (0.0,), 2.0),
    ("U(-0.05sqrt3,0.05sqrt3)", "uniform", (-0.05 * math.sqrt(3.0), 0.05 * math.sqrt(3.0)), 2.0),
    ("two-point(+-0.05)", "two_point", (-0.05, 0.05, 0.5), 2.0),
)

TABLE2_DTS = (0.2, 0.1, 0.05)


def _table_meta(cfg: ExperimentConfig) -> dict:
    return {"version": __version__, "backend": default_backend(), "seed": cfg.seed}


# ---------------------------------------------------------------------------
# Monte Carlo pricing under partial observation


@dataclass
class MCRun:
    """Forward filter pass plus the backward regression for one config."""

    config: ExperimentConfig
    basis: rmc.BasisSet
    summaries: FilterSummaries
    F: np.ndarray
    G: np.ndarray
    fit: rmc.RegressionFit
    estimate: rmc.ValueEstimate
    runtime: float = float("nan")


def run_mc(cfg: ExperimentConfig, *, backend: str | None = None) -> MCRun:
    t0 = time.perf_counter()
    model = cfg.build_model()
    basis = cfg.build_basis()
    summ = filter_summaries(model, cfg.grid(), cfg.law(), cfg.particles, cfg.y0, cfg.paths, cfg.seed,
                            functionals=basis.functionals, backend=backend, eur_order=cfg.eur_order)
    F, G = rmc.basis_matrix(basis, summ)
    meta = {"n": cfg.particles, "filter_backend": summ.backend}
    if cfg.algo == "ls":
        fit, _, est = rmc.backward_induction(F, G, basis.names, meta)
    else:
        fit, est = rmc.tvr_backward_induction(F, G, basis.names, meta)
    return MCRun(cfg, basis, summ, F, G, fit, est, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# European benchmark


def _european_block_lg(p, law: InitialLaw, y0: float, gen: np.random.Generator, size: int) -> np.ndarray:
    """Exact terminal draws: (X_T, Y_T) given X_0 is Gaussian."""
    ex, ey, vx, vy, cxy = kalman.transition_moments(p, p.T)
    x0 = law.sample(gen, size)[:, 0]
    z = gen.standard_normal((size, 2))
    sx = math.sqrt(vx)
    b = cxy / sx if sx > 0 else 0.0
    s_rest = math.sqrt(max(vy - b * b, 0.0))
    xT = ex * x0 + sx * z[:, 0]
    yT = y0 + ey * x0 - p.a * p.T + b * z[:, 0] + s_rest * z[:, 1]
    return math.exp(-p.r * p.T) * np.maximum(yT * (p.c1 + xT) - p.c2, 0.0)


def _european_block_euler(model, grid, law: InitialLaw, y0: float, gen: np.random.Generator,
                          size: int) -> np.ndarray:
    """Euler joint paths under the physical measure, step-major draws."""
    h = grid.h
    sq = math.sqrt(h)
    dY = model.d_y
    x = law.sample(gen, size).reshape(size, model.d)
    y = np.full((size, dY), float(y0))
    for _ in range(grid.n_sub):
        z = sq * gen.standard_normal((size, dY + model.d_w))
        du, dw = z[:, :dY], z[:, dY:]
        y_next = y + model.h(x) * h + model.obs_vol(x) * du
        x = euler_step(model, x, "physical", du, dw, h)
        y = y_next
    return model.payoff(grid.T, x, y)


def european_mc(cfg: ExperimentConfig, n_paths: int | None = None) -> tuple[float, float, str]:
    """Discounted terminal payoff mean by joint-path Monte Carlo.

    Returns ``(mean, std_error, method)``.  The linear-Gaussian model uses
    exact Gaussian transitions from ``X_0``; other models use Euler paths on
    the config's substep grid.  Paths come in blocks of
    ``EUROPEAN_BLOCK``, block ``k`` drawing from stream ``("european", k)``,
    so the first paths do not depend on the total.
    """
    n_paths = n_paths or cfg.european_paths
    streams = as_factory(cfg.seed)
    model = cfg.build_model()
    law = cfg.law()
    exact = model.family == "linear_gaussian"
    grid = cfg.grid()
    parts = []
    for k in range(math.ceil(n_paths / EUROPEAN_BLOCK)):
        gen = streams.generator("european", k)
        size = min(EUROPEAN_BLOCK, n_paths - k * EUROPEAN_BLOCK)
        if exact:
            parts.append(_european_block_lg(model.params, law, cfg.y0, gen, size))
        else:
            parts.append(_european_block_euler(model, grid, law, cfg.y0, gen, size))
    v = np.concatenate(parts)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)), "exact" if exact else "euler"


# ---------------------------------------------------------------------------
# PDE benchmark


def pde_solve(cfg: ExperimentConfig, *, keep_surfaces: bool = False, european: bool = False) -> pde.SolverResult:
    """Finite-difference Bermudan solve matching the config's exercise grid."""
    M = cfg.grid().M
    law = cfg.law()
    p = cfg.model_params()
    if cfg.model == "linear_gaussian":
        if law.kind not in ("gaussian", "dirac"):
            raise ConfigError(f"no finite-dimensional filter for a {law.kind} initial law; the PDE needs "
                              "a Gaussian or Dirac law")
        P0 = law.params[1] ** 2 if law.kind == "gaussian" else 0.0
        grid = pde.kalman_grid(T=cfg.T, M=M, n1=cfg.pde_n1, n2=cfg.pde_n2)
        return pde.solve_bermudan_kalman(p, P0, grid, european=european, keep_surfaces=keep_surfaces)
    if law.kind != "dirac":
        raise ConfigError("the full-observation PDE needs a Dirac initial volatility")
    grid = pde.stein_stein_grid(p, cfg.y0, law.params[0], M=M, n1=cfg.pde_n1, n2=cfg.pde_n2)
    return pde.solve_bermudan_stein_stein(p, grid, european=european, keep_surfaces=keep_surfaces)


def pde_value(cfg: ExperimentConfig, *, european: bool = False) -> tuple[float, pde.SolverResult]:
    res = pde_solve(cfg, european=european)
    x0 = cfg.law().mean
    return pde.query_value(res, (x0, cfg.y0)), res


# ---------------------------------------------------------------------------
# single config


def _row(experiment: str, label: str, solver: str, cfg: ExperimentConfig, value: float, se: float,
         runtime: float, **extra) -> ResultRow:
    return ResultRow(experiment=experiment, label=label, solver=solver, value=float(value), std_error=float(se),
                     config_hash=cfg.config_hash(), config=cfg.record(), extra=extra, runtime=runtime)


def _mc_row(experiment: str, label: str, cfg: ExperimentConfig, run: MCRun | None = None) -> ResultRow:
    run = run or run_mc(cfg)
    est = run.estimate
    return _row(experiment, label, "mc", cfg, est.value, est.std_error, run.runtime, algo=cfg.algo,
                G0=est.G0, stop_at_zero=bool(run.fit.stop_at_zero))


def _pde_row(experiment: str, label: str, cfg: ExperimentConfig, european: bool = False) -> ResultRow:
    t0 = time.perf_counter()
    v, res = pde_value(cfg, european=european)
    return _row(experiment, label, "pde", cfg, v, float("nan"), time.perf_counter() - t0,
                n_steps=res.n_steps, cfl=res.cfl)


def _european_row(experiment: str, label: str, cfg: ExperimentConfig) -> ResultRow:
    t0 = time.perf_counter()
    mean, se, method = european_mc(cfg)
    return _row(experiment, label, "european", cfg, mean, se, time.perf_counter() - t0, method=method,
                european_paths=cfg.european_paths)


def price(cfg: ExperimentConfig) -> ResultTable:
    """One row for the config's solver."""
    table = ResultTable("price", meta=_table_meta(cfg))
    label = f"{cfg.model}:{cfg.law().describe()}:y0={cfg.y0!r}"
    if cfg.solver == "mc":
        table.append(_mc_row("price", label, cfg))
    elif cfg.solver == "pde":
        table.append(_pde_row("price", label, cfg))
    else:
        table.append(_european_row("price", label, cfg))
    return table


# ---------------------------------------------------------------------------
# tables


def table1_configs(base: ExperimentConfig | None = None) -> list[tuple[str, ExperimentConfig]]:
    base = base or ExperimentConfig()
    if base.model != "linear_gaussian":
        raise ConfigError("the first table uses the linear-Gaussian model")
    return [(label, base.with_overrides(x0_law=kind, x0_params=params, y0=y0))
            for label, kind, params, y0 in TABLE1_ROWS]


def run_table1(base: ExperimentConfig | None = None, *, rows: list[str] | None = None, pde_solver: bool = True,
               european: bool = True) -> ResultTable:
    """Simulation, PDE (Gaussian/Dirac laws only) and European values per initial law."""
    base = base or ExperimentConfig()
    table = ResultTable("table1", meta=_table_meta(base))
    for label, cfg in table1_configs(base):
        if rows is not None and label not in rows:
            continue
        table.append(_mc_row("table1", label, cfg))
        if pde_solver and cfg.law().kind in ("gaussian", "dirac"):
            table.append(_pde_row("table1", label, cfg))
        if european:
            table.append(_european_row("table1", label, cfg))
    return table


def table2_base(overrides: dict | None = None) -> ExperimentConfig:
    base = ExperimentConfig(model="stein_stein", paths=30000, particles=1000)
    return base.with_overrides(**(overrides or {}))


def table2_config(base: ExperimentConfig, dt: float) -> ExperimentConfig:
    """Observations at the exercise dates, Euler steps of 0.01."""
    return base.with_overrides(dt=dt, delta=dt, substeps=max(1, round(dt / 0.01)))


def run_table2(base: ExperimentConfig | None = None, *, dts=TABLE2_DTS, european: bool = True) -> ResultTable:
    """Full-observation PDE and partial-observation simulation value per exercise spacing."""
    base = base or table2_base()
    if base.model != "stein_stein":
        raise ConfigError("the second table uses the Stein-Stein model")
    table = ResultTable("table2", meta=_table_meta(base))
    for dt in dts:
        cfg = table2_config(base, dt)
        label = f"dt={dt!r}"
        table.append(_pde_row("table2", label, cfg))
        table.append(_mc_row("table2", label, cfg))
    if european:
        table.append(_european_row("table2", "european", table2_config(base, min(dts))))
    return table


# ---------------------------------------------------------------------------
# filter convergence against the Kalman filter


@dataclass
class ConvergenceReport:
    n_list: list[int]
    rmse: list[float]
    slope: float
    slope_ci: tuple[float, float]
    intercept: float
    trials: int
    seed: int

    def to_table(self) -> ResultTable:
        table = ResultTable("converge", meta={"version": __version__, "seed": self.seed, "trials": self.trials,
                                              "slope": self.slope, "slope_ci": list(self.slope_ci),
                                              "intercept": self.intercept})
        for n, e in zip(self.n_list, self.rmse):
            table.append(ResultRow("converge", f"n={n}", "rmse", e, float("nan"),
                                   config={"n": n, "trials": self.trials, "seed": self.seed}))
        table.append(ResultRow("converge", "slope", "loglog", self.slope, float("nan"),
                               extra={"ci_low": self.slope_ci[0], "ci_high": self.slope_ci[1]},
                               config={"trials": self.trials, "seed": self.seed}))
        return table


def run_convergence_study(n_list=(50, 100, 200, 400, 800, 1600), trials: int = 200,
                          cfg: ExperimentConfig | None = None, level: float = 0.95) -> ConvergenceReport:
    """RMSE of the particle estimate of ``E[X_T | Y]`` against the Kalman mean.

    Every particle count filters the same ``trials`` observation paths.  The
    Kalman reference runs on the same Euler grid as the particle filter.
    """
    cfg = cfg or ExperimentConfig()
    if cfg.model != "linear_gaussian":
        raise ConfigError("the convergence study needs the linear-Gaussian model")
    law = cfg.law()
    if law.kind not in ("gaussian", "dirac"):
        raise ConfigError("the Kalman reference needs a Gaussian or Dirac initial law")
    n_list = sorted(int(n) for n in n_list)
    if len(n_list) < 3:
        raise ValueError("need at least three particle counts for a slope with an interval")
    p = cfg.model_params()
    model = cfg.build_model()
    grid = cfg.grid()
    P0 = law.params[1] ** 2 if law.kind == "gaussian" else 0.0
    dy = observation_increments(grid, 1, trials, cfg.seed, scale=p.sigma_y)[..., 0]
    ric = kalman.riccati_solve(p, P0, grid.T, grid.h)
    m_T = kalman.kalman_filter_means(p, law.mean, ric, dy, grid.h)[:, -1]
    rmse = []
    for n in n_list:
        summ = filter_summaries(model, grid, law, n, cfg.y0, trials, cfg.seed, functionals=("x",))
        err = summ.pi("x")[:, -1] - m_T
        rmse.append(float(np.sqrt(np.mean(err * err))))
    fit = stats.linregress(np.log(n_list), np.log(rmse))
    q = stats.t.ppf(0.5 + level / 2.0, len(n_list) - 2)
    ci = (float(fit.slope - q * fit.stderr), float(fit.slope + q * fit.stderr))
    return ConvergenceReport(n_list, rmse, float(fit.slope), ci, float(fit.intercept), trials, cfg.seed)


# ---------------------------------------------------------------------------
# stopping region


@dataclass
class RegionReport:
    t: float
    points: list[dict]
    boundary: list[dict]
    stopped_early: int      # PDE continues, simulation stops
    stopped_late: int       # PDE stops, simulation continues
    paths: list[Path] = field(default_factory=list)


def _nearest(axis: np.ndarray, v: np.ndarray) -> np.ndarray:
    h = axis[1] - axis[0]
    return np.clip(np.rint((v - axis[0]) / h).astype(int), 0, len(axis) - 1)


def export_stopping_region(cfg: ExperimentConfig, t: float = 0.5, out_dir=None, *, mc: MCRun | None = None,
                           pde_result: pde.SolverResult | None = None) -> RegionReport:
    """Per-path stop/continue decisions at date ``t`` next to the PDE region.

    Points are projected on the filter mean ``pi_t x`` and the observation,
    with the reward ``G`` and fitted continuation ``q_hat`` that decide them.
    The PDE decision is read off the nearest grid node.  With ``out_dir``
    the points and the PDE boundary are written as ``region_points.csv``
    and ``region_boundary.csv``.
    """
    if cfg.model != "linear_gaussian":
        raise ConfigError("the stopping-region export uses the linear-Gaussian model")
    times = cfg.grid().exercise_times()
    hits = np.flatnonzero(np.isclose(times, t, rtol=0.0, atol=1e-9))
    if hits.size == 0:
        raise ValueError(f"t={t!r} is not an exercise date of the grid {times.tolist()}")
    e = int(hits[0])
    mc = mc or run_mc(cfg)
    pde_result = pde_result or pde_solve(cfg)
    policy = rmc.extract_policy(mc.fit)
    stop = policy.decide(e, mc.F[:, e], mc.G[:, e])
    q_hat = policy.continuation(e, mc.F[:, e])
    m = mc.summaries.pi("x")[:, e]
    y = mc.summaries.y[:, e, 0]
    g = pde_result.grid
    inside = (m >= g.x1[0]) & (m <= g.x1[1]) & (y >= g.x2[0]) & (y <= g.x2[1])
    mask = pde_result.exercise_masks[e][_nearest(g.axis1, m), _nearest(g.axis2, y)]
    points = []
    for k in range(len(m)):
        pde_dec = ("stop" if mask[k] else "continue") if inside[k] else ""
        points.append({"path": k, "t": float(times[e]), "m": float(m[k]), "y": float(y[k]),
                       "G": float(mc.G[k, e]), "q_hat": float(q_hat[k]),
                       "decision": "stop" if stop[k] else "continue", "pde_decision": pde_dec})
    bnd = pde.exercise_boundary(pde_result, e)
    boundary = [{"t": float(times[e]), "m": float(a), "y_stop": float(b)} for a, b in zip(g.axis1, bnd)]
    early = int(np.sum(inside & stop & ~mask))
    late = int(np.sum(inside & ~stop & mask))
    report = RegionReport(float(times[e]), points, boundary, early, late)
    if out_dir is not None:
        out_dir = Path(out_dir)
        report.paths = [write_rows_csv(points, out_dir / "region_points.csv"),
                        write_rows_csv(boundary, out_dir / "region_boundary.csv")]
    return report


def region_table(report: RegionReport, cfg: ExperimentConfig) -> ResultTable:
    table = ResultTable("region", meta=_table_meta(cfg))
    n = len(report.points)
    n_stop = sum(p["decision"] == "stop" for p in report.points)
    for label, v in (("stop_fraction", n_stop / n if n else float("nan")),
                     ("stopped_early", float(report.stopped_early)),
                     ("stopped_late", float(report.stopped_late))):
        table.append(ResultRow("region", label, "mc-vs-pde", v, float("nan"), cfg.config_hash(), cfg.record(),
                               extra={"t": report.t}))
    return table
