# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.

Draw order from the numpy bit generators is identical to ``fallback.py`` so
both backends consume the same random numbers.
"""

from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport exp, log, sqrt, erfc, fabs, isfinite
from libc.stdlib cimport malloc, free
from numpy.random cimport bitgen_t
from numpy.random.c_distributions cimport random_standard_normal, random_standard_uniform

cdef double INV_SQRT_2PI = 0.3989422804014327
cdef double SQRT1_2 = 0.7071067811865476
cdef double HALF_LOG_2PI = 0.9189385332046727
cdef double LOG_TINY = -745.0


cdef bitgen_t* _bitgen(object gen) except NULL:
    capsule = gen.bit_generator.capsule
    return <bitgen_t*> PyCapsule_GetPointer(capsule, "BitGenerator")


cdef double _offspring(const double* la, int n, double u, int* counts, double* frac) noexcept nogil:
    """Systematic residual offspring counts from log weights.

    Returns log((1/n) sum_j exp(la_j)).
    """
    cdef int j, prev, k, deficit
    cdef double mx = la[0], s = 0.0, x, frsum = 0.0, scale, cum = 0.0
    cdef long base = 0, R
    for j in range(1, n):
        if la[j] > mx:
            mx = la[j]
    for j in range(n):
        frac[j] = exp(la[j] - mx)
        s += frac[j]
    for j in range(n):
        x = n * frac[j] / s
        counts[j] = <int> x            # floor, x >= 0
        frac[j] = x - counts[j]
        base += counts[j]
        frsum += frac[j]
    R = n - base
    if R <= 0 or frsum <= 0.0:
        return mx + log(s / n)
    scale = R / frsum
    prev = 0
    for j in range(n):
        cum += frac[j] * scale
        x = cum - u
        k = <int> x                    # ceil, x > -1
        if k < x:
            k += 1
        if k > R:
            k = <int> R
        if k - prev > 1:
            k = prev + 1
        if k > prev:
            counts[j] += k - prev
            frac[j] = -1.0
            prev = k
    deficit = <int> R - prev
    j = n - 1
    while deficit > 0 and j >= 0:
        if frac[j] > 0.0:
            counts[j] += 1
            deficit -= 1
        j -= 1
    return mx + log(s / n)


def branch_counts(double[:, ::1] log_w, double[::1] u, int[:, ::1] out):
    """Offspring counts for many independent weight vectors (rows)."""
    cdef Py_ssize_t R = log_w.shape[0], i
    cdef int n = <int> log_w.shape[1]
    cdef double* frac = <double*> malloc(n * sizeof(double))
    try:
        with nogil:
            for i in range(R):
                _offspring(&log_w[i, 0], n, u[i], &out[i, 0], frac)
    finally:
        free(frac)


cdef void _resample(double* v, double* vnew, const int* counts, int n) noexcept nogil:
    cdef int j, c, idx = 0
    for j in range(n):
        for c in range(counts[j]):
            vnew[idx] = v[j]
            idx += 1
    for j in range(n):
        v[j] = vnew[j]


cdef inline double _norm_cdf(double z) noexcept nogil:
    return 0.5 * erfc(-z * SQRT1_2)


def lg_reference_filter(double[:, ::1] v0, double[:, ::1] dyn, list mut_gens, list br_gens,
                        int substeps, int obs_per_ex, double delta, double[::1] coef,
                        double[:, ::1] y_ex, double[::1] times_ex,
                        bint want_eur, double[:, ::1] eur_tab,
                        double[::1] gh_z, double[::1] gh_w,
                        double[:, :, ::1] stats, double[:, ::1] log_rho1):
    """Reference-measure particle filter for the linear-Gaussian family.

    coef = [bt0, bt1, alpha, sig, h0, h1, r, c1, c2]
    eur_tab rows = [ex, ey, a_tau, sy, beta, s_cond, discount] per exercise date:
    Y_T = my + sy Z and X_T | Z ~ N(mx + beta Z, s_cond^2).
    stats[b, e] = normalized means of [x, x^2, g, eur] at exercise date e.
    """
    cdef Py_ssize_t B = v0.shape[0], b
    cdef int n = <int> v0.shape[1]
    cdef int S = <int> dyn.shape[1]
    cdef int K = S // substeps
    cdef int nq = <int> gh_z.shape[0]
    cdef int j, l, i, e, q
    cdef double bt0 = coef[0], bt1 = coef[1], alpha = coef[2], sig = coef[3]
    cdef double h0 = coef[4], h1 = coef[5], r = coef[6], c1 = coef[7], c2 = coef[8]
    cdef double hs = delta / substeps, sqh = sqrt(hs)
    cdef double dsum, hv, dyi, mx, s, w, x, y, disc, gsum, x1, x2, esum, logZ, u
    cdef double ex, ey, atau, syT, beta, sc, mxT, myT, uq, A, Bq, z, val
    cdef bitgen_t* bgm
    cdef bitgen_t* bgb
    cdef double* v = <double*> malloc(n * sizeof(double))
    cdef double* vnew = <double*> malloc(n * sizeof(double))
    cdef double* la = <double*> malloc(n * sizeof(double))
    cdef double* frac = <double*> malloc(n * sizeof(double))
    cdef int* counts = <int*> malloc(n * sizeof(int))
    try:
        for b in range(B):
            bgm = _bitgen(mut_gens[b])
            bgb = _bitgen(br_gens[b])
            with nogil:
                for j in range(n):
                    v[j] = v0[b, j]
                    la[j] = 0.0
                logZ = 0.0
                e = 0
                l = -1
                while True:
                    if l == -1 or (l + 1) % obs_per_ex == 0:
                        # statistics at exercise date e
                        mx = la[0]
                        for j in range(1, n):
                            if la[j] > mx:
                                mx = la[j]
                        s = 0.0
                        x1 = 0.0
                        x2 = 0.0
                        gsum = 0.0
                        esum = 0.0
                        y = y_ex[b, e]
                        disc = exp(-r * times_ex[e])
                        if want_eur:
                            ex = eur_tab[e, 0]
                            ey = eur_tab[e, 1]
                            atau = eur_tab[e, 2]
                            syT = eur_tab[e, 3]
                            beta = eur_tab[e, 4]
                            sc = eur_tab[e, 5]
                        for j in range(n):
                            w = exp(la[j] - mx)
                            x = v[j]
                            s += w
                            x1 += w * x
                            x2 += w * x * x
                            val = y * (c1 + x) - c2
                            if val > 0.0:
                                gsum += w * val
                            if want_eur:
                                mxT = ex * x
                                myT = y + ey * x - atau
                                val = 0.0
                                for q in range(nq):
                                    uq = myT + syT * gh_z[q]
                                    A = uq * (c1 + mxT + beta * gh_z[q]) - c2
                                    Bq = fabs(uq) * sc
                                    if Bq > 0.0:
                                        z = A / Bq
                                        val += gh_w[q] * (A * _norm_cdf(z) + Bq * INV_SQRT_2PI * exp(-0.5 * z * z))
                                    elif A > 0.0:
                                        val += gh_w[q] * A
                                esum += w * val
                        stats[b, e, 0] = x1 / s
                        stats[b, e, 1] = x2 / s
                        stats[b, e, 2] = disc * gsum / s
                        stats[b, e, 3] = eur_tab[e, 6] * esum / s if want_eur else 0.0
                        log_rho1[b, e] = logZ + mx + log(s / n)
                        e += 1
                    l += 1
                    if l == K:
                        break
                    if l > 0:
                        # branch at the start of every interval after the first
                        u = random_standard_uniform(bgb)
                        logZ += _offspring(la, n, u, counts, frac)
                        _resample(v, vnew, counts, n)
                        for j in range(n):
                            la[j] = 0.0
                    # weights use the interval-start locations
                    dsum = 0.0
                    for i in range(substeps):
                        dsum += dyn[b, l * substeps + i]
                    for j in range(n):
                        hv = h0 + h1 * v[j]
                        la[j] += hv * dsum - 0.5 * hv * hv * delta
                    for i in range(substeps):
                        dyi = dyn[b, l * substeps + i]
                        for j in range(n):
                            v[j] = v[j] + (bt0 + bt1 * v[j]) * hs + alpha * dyi + sig * (sqh * random_standard_normal(bgm))
            for j in range(n):
                if not isfinite(v[j]):
                    raise FloatingPointError(f"non-finite particle location (path {b}, particle {j})")
    finally:
        free(v)
        free(vnew)
        free(la)
        free(frac)
        free(counts)


def ss_candidate_filter(double[:, ::1] v0, double[:, ::1] y_obs, list mut_gens, list br_gens,
                        int substeps, int obs_per_ex, double hs, double[::1] coef, double bw,
                        double[::1] times_ex, double[:, :, ::1] stats, double[:, ::1] log_rho1):
    """Candidate-observation particle filter for the Stein-Stein family.

    coef = [kappa, sigma_bar, alpha_vol, rho, r, K]; y_obs holds the true
    observations at every observation date.  Gaussian kernel with bandwidth
    1 / bw.  stats[b, e] = normalized means of [x, x^2, g].
    Returns -1 on success, else the index of the first collapsed path.
    """
    cdef Py_ssize_t B = v0.shape[0], b
    cdef int n = <int> v0.shape[1]
    cdef int K = <int> y_obs.shape[1] - 1
    cdef int j, l, i, e
    cdef double kappa = coef[0], sbar = coef[1], av = coef[2], rho = coef[3], r = coef[4], Kst = coef[5]
    cdef double sqh = sqrt(hs)
    cdef double a_u = rho * av * sqh, a_w = sqrt(1.0 - rho * rho) * av * sqh
    cdef double logbw = log(bw)
    cdef double U, W, x, d, mx, s, w, x1, x2, logZ, u, g, yt
    cdef bitgen_t* bgm
    cdef bitgen_t* bgb
    cdef double* v = <double*> malloc(n * sizeof(double))
    cdef double* vnew = <double*> malloc(n * sizeof(double))
    cdef double* yc = <double*> malloc(n * sizeof(double))
    cdef double* la = <double*> malloc(n * sizeof(double))
    cdef double* frac = <double*> malloc(n * sizeof(double))
    cdef int* counts = <int*> malloc(n * sizeof(int))
    cdef int status = -1
    try:
        for b in range(B):
            bgm = _bitgen(mut_gens[b])
            bgb = _bitgen(br_gens[b])
            with nogil:
                for j in range(n):
                    v[j] = v0[b, j]
                    la[j] = 0.0
                logZ = 0.0
                e = 0
                l = -1
                while True:
                    if l == -1 or (l + 1) % obs_per_ex == 0:
                        mx = la[0]
                        for j in range(1, n):
                            if la[j] > mx:
                                mx = la[j]
                        s = 0.0
                        x1 = 0.0
                        x2 = 0.0
                        for j in range(n):
                            w = exp(la[j] - mx)
                            s += w
                            x1 += w * v[j]
                            x2 += w * v[j] * v[j]
                        g = Kst - exp(y_obs[b, (l + 1)])
                        stats[b, e, 0] = x1 / s
                        stats[b, e, 1] = x2 / s
                        stats[b, e, 2] = exp(-r * times_ex[e]) * (g if g > 0.0 else 0.0)
                        log_rho1[b, e] = logZ + mx + log(s / n)
                        e += 1
                    l += 1
                    if l == K:
                        break
                    if l > 0:
                        u = random_standard_uniform(bgb)
                        logZ += _offspring(la, n, u, counts, frac)
                        _resample(v, vnew, counts, n)
                    yt = y_obs[b, l]
                    for j in range(n):
                        yc[j] = yt
                    for i in range(substeps):
                        for j in range(n):
                            U = random_standard_normal(bgm)
                            W = random_standard_normal(bgm)
                            x = v[j]
                            v[j] = x + kappa * (sbar - x) * hs + a_u * U + a_w * W
                            yc[j] = yc[j] + (r - 0.5 * x * x) * hs + x * sqh * U
                    yt = y_obs[b, l + 1]
                    mx = LOG_TINY - 1.0
                    for j in range(n):
                        d = bw * (yc[j] - yt)
                        la[j] = logbw - HALF_LOG_2PI - 0.5 * d * d
                        if la[j] > mx:
                            mx = la[j]
                    if mx < LOG_TINY:
                        status = <int> b
                        break
            if status >= 0:
                return status
    finally:
        free(v)
        free(vnew)
        free(yc)
        free(la)
        free(frac)
        free(counts)
    return status


def explicit_step(double[:, ::1] V, double[:, ::1] out,
                  double[::1] wm, double[::1] w0, double[::1] wp,
                  double[::1] zm, double[::1] zp, double[::1] xc, double dt):
    """One explicit step on a 2-D grid; coefficients vary along axis 0 only.

    Boundaries are filled by linear extrapolation (zero second derivative).
    """
    cdef Py_ssize_t n1 = V.shape[0], n2 = V.shape[1], i, j
    with nogil:
        for i in range(1, n1 - 1):
            for j in range(1, n2 - 1):
                out[i, j] = V[i, j] + dt * (
                    wm[i] * V[i - 1, j] + w0[i] * V[i, j] + wp[i] * V[i + 1, j]
                    + zm[i] * V[i, j - 1] + zp[i] * V[i, j + 1]
                    + xc[i] * (V[i + 1, j + 1] - V[i + 1, j - 1] - V[i - 1, j + 1] + V[i - 1, j - 1]))
        for j in range(1, n2 - 1):
            out[0, j] = 2.0 * out[1, j] - out[2, j]
            out[n1 - 1, j] = 2.0 * out[n1 - 2, j] - out[n1 - 3, j]
        for i in range(n1):
            out[i, 0] = 2.0 * out[i, 1] - out[i, 2]
            out[i, n2 - 1] = 2.0 * out[i, n2 - 2] - out[i, n2 - 3]
