import math

import numpy as np
import pytest

from pobstop import InitialLaw, SimGrid, linear_gaussian_model, stein_stein_model
from pobstop import _kernels
from pobstop._kernels import fallback
from pobstop.pde import kalman_grid, solve_bermudan_kalman
from pobstop.pfilter import filter_summaries

needs_compiled = pytest.mark.skipif(not _kernels.compiled_available(), reason="extension not built")


def test_resolve(monkeypatch):
    assert _kernels.resolve("python") == "python"
    with pytest.raises(ValueError):
        _kernels.resolve("fortran")
    monkeypatch.setenv("POBSTOP_BACKEND", "python")
    assert _kernels.default_backend() == "python"
    assert _kernels.module() is fallback


@needs_compiled
class TestCompiledMatchesPython:
    def test_branch_counts(self):
        rng = np.random.default_rng(0)
        la = rng.normal(0, 2, (64, 37))
        u = rng.random(64)
        a = np.empty((64, 37), dtype=np.int32)
        b = np.empty((64, 37), dtype=np.int32)
        _kernels._core.branch_counts(la, u, a)
        fallback.branch_counts(la, u, b)
        np.testing.assert_array_equal(a, b)

    def test_explicit_step(self):
        rng = np.random.default_rng(1)
        V = rng.random((30, 20))
        w = [rng.normal(size=30) for _ in range(6)]
        a = np.zeros_like(V)
        b = np.zeros_like(V)
        _kernels._core.explicit_step(V, a, *w, 1e-3)
        fallback.explicit_step(V, b, *w, 1e-3)
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)

    def test_linear_gaussian_filter(self):
        m = linear_gaussian_model()
        g = SimGrid(1.0, 0.25, 0.05)
        kw = dict(functionals=("x", "x2", "g", "eur"), eur_order=6)
        a = filter_summaries(m, g, InitialLaw.gaussian(0, 0.05), 40, 2.0, 5, 7, backend="compiled", **kw)
        b = filter_summaries(m, g, InitialLaw.gaussian(0, 0.05), 40, 2.0, 5, 7, backend="python", **kw)
        assert (a.backend, b.backend) == ("compiled", "python")
        for nm in kw["functionals"]:
            np.testing.assert_allclose(a.moments[nm], b.moments[nm], rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(a.log_rho1, b.log_rho1, rtol=1e-9, atol=1e-12)

    def test_stein_stein_filter(self):
        m = stein_stein_model()
        g = SimGrid(1.0, 0.25, 0.05)
        kw = dict(functionals=("x", "x2", "g"))
        a = filter_summaries(m, g, InitialLaw.dirac(0.15), 40, math.log(110), 5, 7, backend="compiled", **kw)
        b = filter_summaries(m, g, InitialLaw.dirac(0.15), 40, math.log(110), 5, 7, backend="python", **kw)
        for nm in kw["functionals"]:
            np.testing.assert_allclose(a.moments[nm], b.moments[nm], rtol=1e-9, atol=1e-12)
        np.testing.assert_array_equal(a.x_true, b.x_true)

    def test_pde_solver(self):
        p = linear_gaussian_model().params
        g = kalman_grid(n1=41, n2=41, M=4)
        a = solve_bermudan_kalman(p, 0.0025, g, backend="compiled")
        b = solve_bermudan_kalman(p, 0.0025, g, backend="python")
        np.testing.assert_allclose(a.value, b.value, rtol=1e-10, atol=1e-13)
        np.testing.assert_array_equal(a.exercise_masks, b.exercise_masks)
