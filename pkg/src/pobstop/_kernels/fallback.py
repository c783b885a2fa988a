"""Pure numpy versions of the compiled kernels.

The filters here are generic over the model callables and vectorized over a
chunk of paths.  Random numbers are consumed in the same order as the
compiled kernels: per path, mutation normals substep-major then particle
(then noise component), one branching uniform per interval boundary.
"""

from __future__ import annotations

import math

import numpy as np

from ..model import euler_step

LOG_TINY = -745.0


class CollapseSignal(Exception):
    """Raised when every candidate weight underflows on some path."""

    def __init__(self, path: int):
        super().__init__(path)
        self.path = path


def _seq_sum(a: np.ndarray) -> np.ndarray:
    """Left-to-right sum over the last axis (matches the compiled loops)."""
    return np.cumsum(a, axis=-1)[..., -1]


def systematic_offspring(log_w: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Systematic residual offspring counts, one row per weight vector.

    Each particle gets ``floor(n abar_j)`` offspring plus at most one more;
    the extra ones are placed by a single uniform shift ``u`` over the
    cumulative fractional parts, so every row sums to ``n``.
    """
    log_w = np.atleast_2d(np.asarray(log_w, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    R, n = log_w.shape
    w = np.exp(log_w - log_w.max(axis=1, keepdims=True))
    s = _seq_sum(w)
    x = (n * w) / s[:, None]
    base = np.floor(x)
    frac = x - base
    counts = base.astype(np.int64)
    rem = n - counts.sum(axis=1)
    frsum = _seq_sum(frac)
    active = (rem > 0) & (frsum > 0)
    if not active.any():
        return counts
    scale = np.where(active, rem / np.where(active, frsum, 1.0), 0.0)
    cum = np.cumsum(frac * scale[:, None], axis=1)
    k = np.minimum(np.ceil(cum - u[:, None]), rem[:, None])
    k = np.maximum.accumulate(np.maximum(k, 0.0), axis=1)
    extra = np.diff(k, axis=1, prepend=0.0)
    extra = np.minimum(extra, 1.0).astype(np.int64)
    extra[~active] = 0
    counts += extra
    deficit = n - counts.sum(axis=1)
    for i in np.flatnonzero(deficit > 0):
        # floating-point edge: hand the rest to particles without an extra child
        cand = np.flatnonzero((frac[i] > 0) & (extra[i] == 0))[::-1]
        counts[i, cand[:deficit[i]]] += 1
    return counts


def parent_indices(counts: np.ndarray) -> np.ndarray:
    """Flat parent index for every post-branch slot, shape ``(R, n)``."""
    R, n = counts.shape
    return np.repeat(np.arange(R * n), counts.ravel()).reshape(R, n)


def _branch_rows(v, la, gens):
    """Branch every path of the chunk; returns new locations and log Z increments."""
    B, n, d = v.shape
    u = np.array([g.random() for g in gens])
    mx = la.max(axis=1)
    s = _seq_sum(np.exp(la - mx[:, None]))
    dlogz = mx + np.log(s / n)
    counts = systematic_offspring(la, u)
    v = v.reshape(B * n, d)[parent_indices(counts)]
    return v, dlogz


def _record(stats, log_rho1, e, la, logz, values):
    n = la.shape[1]
    mx = la.max(axis=1)
    w = np.exp(la - mx[:, None])
    s = w.sum(axis=1)
    for f, val in enumerate(values):
        stats[:, e, f] = (w * val).sum(axis=1) / s
    log_rho1[:, e] = logz + mx + np.log(s / n)


def reference_filter(model, v0, dy, mut_gens, br_gens, *, substeps, obs_per_ex, delta,
                     y_ex, times_ex, functionals):
    """Particle filter under the reference measure for a chunk of paths.

    Parameters
    ----------
    v0 : (B, n, d) initial particles.
    dy : (B, S, d_y) raw observation increments.
    y_ex : (B, M + 1, d_y) observations at exercise dates.
    functionals : list of callables ``f(t, x, y) -> (B, n)``.

    Returns
    -------
    stats : (B, M + 1, F) normalized means of the functionals.
    log_rho1 : (B, M + 1) log of the unnormalized total mass.
    """
    B, n, d = v0.shape
    S = dy.shape[1]
    K = S // substeps
    M = K // obs_per_ex
    dyn = dy / model.obs_scale
    hs = delta / substeps
    sqh = math.sqrt(hs)
    noise = np.stack([g.standard_normal((S, n, model.d_w)) for g in mut_gens])
    v = np.array(v0, dtype=float)
    la = np.zeros((B, n))
    logz = np.zeros(B)
    stats = np.empty((B, M + 1, len(functionals)))
    log_rho1 = np.empty((B, M + 1))

    def record(e):
        y = y_ex[:, e][:, None, :]
        _record(stats, log_rho1, e, la, logz, [f(times_ex[e], v, y) for f in functionals])

    record(0)
    for l in range(K):
        if l > 0:
            v, dlogz = _branch_rows(v, la, br_gens)
            logz += dlogz
            la[:] = 0.0
        block = dyn[:, l * substeps:(l + 1) * substeps]
        dsum = _seq_sum(np.swapaxes(block, 1, 2))
        hv = model.h_normalized(v)
        la += np.einsum("bnk,bk->bn", hv, dsum) - 0.5 * delta * (hv * hv).sum(axis=-1)
        for i in range(substeps):
            idx = l * substeps + i
            v = euler_step(model, v, "reference", block[:, i][:, None, :], sqh * noise[:, idx], hs)
        if (l + 1) % obs_per_ex == 0:
            record((l + 1) // obs_per_ex)
    return stats, log_rho1


def candidate_filter(model, v0, y_obs, mut_gens, br_gens, *, substeps, obs_per_ex, hs,
                     kernel_logpdf, bw, times_ex, functionals):
    """Candidate-observation particle filter under the physical measure.

    ``y_obs`` has shape ``(B, K + 1, d_y)`` with the true observation at every
    observation date.  Raises :class:`CollapseSignal` with the chunk-local path
    index when every weight of a path underflows.
    """
    B, n, d = v0.shape
    K = y_obs.shape[1] - 1
    M = K // obs_per_ex
    dY = model.d_y
    S = K * substeps
    sqh = math.sqrt(hs)
    noise = np.stack([g.standard_normal((S, n, dY + model.d_w)) for g in mut_gens])
    v = np.array(v0, dtype=float)
    la = np.zeros((B, n))
    logz = np.zeros(B)
    stats = np.empty((B, M + 1, len(functionals)))
    log_rho1 = np.empty((B, M + 1))
    logbw = math.log(bw)

    def record(e, l_obs):
        y = y_obs[:, l_obs][:, None, :]
        _record(stats, log_rho1, e, la, logz, [f(times_ex[e], v, y) for f in functionals])

    record(0, 0)
    for l in range(K):
        if l > 0:
            v, dlogz = _branch_rows(v, la, br_gens)
            logz += dlogz
        yc = np.repeat(y_obs[:, l][:, None, :], n, axis=1)
        for i in range(substeps):
            z = noise[:, l * substeps + i]
            du = sqh * z[..., :dY]
            dw = sqh * z[..., dY:]
            x = v
            yc = yc + model.h(x) * hs + model.obs_vol(x) * du
            v = euler_step(model, x, "physical", du, dw, hs)
        dev = bw * (yc - y_obs[:, l + 1][:, None, :])
        la = (logbw + kernel_logpdf(dev)).sum(axis=-1)
        bad = la.max(axis=1) < LOG_TINY
        if bad.any():
            raise CollapseSignal(int(np.flatnonzero(bad)[0]))
        if (l + 1) % obs_per_ex == 0:
            record((l + 1) // obs_per_ex, l + 1)
    return stats, log_rho1


def explicit_step(V, out, wm, w0, wp, zm, zp, xc, dt):
    """One explicit step; see the compiled version for the stencil."""
    c = V[1:-1, 1:-1]
    a = lambda w: w[1:-1, None]  # noqa: E731
    out[1:-1, 1:-1] = c + dt * (
        a(wm) * V[:-2, 1:-1] + a(w0) * c + a(wp) * V[2:, 1:-1]
        + a(zm) * V[1:-1, :-2] + a(zp) * V[1:-1, 2:]
        + a(xc) * (V[2:, 2:] - V[2:, :-2] - V[:-2, 2:] + V[:-2, :-2]))
    out[0, 1:-1] = 2.0 * out[1, 1:-1] - out[2, 1:-1]
    out[-1, 1:-1] = 2.0 * out[-2, 1:-1] - out[-3, 1:-1]
    out[:, 0] = 2.0 * out[:, 1] - out[:, 2]
    out[:, -1] = 2.0 * out[:, -2] - out[:, -3]


def branch_counts(log_w, u, out):
    out[...] = systematic_offspring(log_w, u)
