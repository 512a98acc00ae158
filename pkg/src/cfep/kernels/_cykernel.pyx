# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled backend for the per-AP data-factor sweep.

Same contract as cfep.kernels._numpy_kernel.data_factor_sweep; the tight
per-(user, slot) loops over small Hermitian systems are the simulator's
hot path.
"""

import numpy as np

from libc.math cimport exp, log, sqrt, M_PI

ctypedef double complex cplx


cdef inline double _abs2(cplx z) noexcept nogil:
    return z.real * z.real + z.imag * z.imag


cdef int _chol(cplx* a, int n) noexcept nogil:
    """In-place lower Cholesky of a Hermitian PD matrix; -1 if not PD."""
    cdef int i, j, p
    cdef cplx s
    cdef double d
    for j in range(n):
        s = 0
        for p in range(j):
            s = s + a[j * n + p] * a[j * n + p].conjugate()
        d = a[j * n + j].real - s.real
        if d <= 0.0:
            return -1
        d = sqrt(d)
        a[j * n + j] = d
        for i in range(j + 1, n):
            s = 0
            for p in range(j):
                s = s + a[i * n + p] * a[j * n + p].conjugate()
            a[i * n + j] = (a[i * n + j] - s) / d
    return 0


cdef int _factor(cplx* mat, cplx* fac, int n, double rel_jitter) noexcept nogil:
    """Copy mat into fac and Cholesky it, retrying once with diagonal jitter."""
    cdef int i
    cdef double tr = 0.0
    for i in range(n * n):
        fac[i] = mat[i]
    if _chol(fac, n) == 0:
        return 0
    for i in range(n):
        tr += mat[i * n + i].real
    for i in range(n * n):
        fac[i] = mat[i]
    for i in range(n):
        fac[i * n + i] = fac[i * n + i] + rel_jitter * tr / n
    return _chol(fac, n)


cdef void _chol_solve(cplx* L, int n, cplx* b, cplx* x) noexcept nogil:
    """Solve (L L^H) x = b given the lower Cholesky factor L."""
    cdef int i, j
    cdef cplx s
    for i in range(n):
        s = b[i]
        for j in range(i):
            s = s - L[i * n + j] * x[j]
        x[i] = s / L[i * n + i].real
    for i in range(n - 1, -1, -1):
        s = x[i]
        for j in range(i + 1, n):
            s = s - L[j * n + i].conjugate() * x[j]
        x[i] = s / L[i * n + i].real


cdef double _quad_from_chol(cplx* L, int n, cplx* r, cplx* w) noexcept nogil:
    """r^H (L L^H)^-1 r via one forward substitution."""
    cdef int i, j
    cdef cplx s
    cdef double q = 0.0
    for i in range(n):
        s = r[i]
        for j in range(i):
            s = s - L[i * n + j] * w[j]
        w[i] = s / L[i * n + i].real
        q += _abs2(w[i])
    return q


cdef double _logdet_from_chol(cplx* L, int n) noexcept nogil:
    cdef int i
    cdef double ld = 0.0
    for i in range(n):
        ld += log(L[i * n + i].real)
    return 2.0 * ld


cdef void _inv_from_chol(cplx* L, int n, cplx* e, cplx* x, cplx* out) noexcept nogil:
    cdef int m, i
    for m in range(n):
        for i in range(n):
            e[i] = 0
        e[m] = 1
        _chol_solve(L, n, e, x)
        for i in range(n):
            out[i * n + m] = x[i]


def data_factor_sweep(y, ext_h_prec, ext_h_pm, log_ext_x, points,
                      double sigma_v2, double prec_floor, double rel_jitter,
                      bint per_symbol_cov):
    """See cfep.kernels._numpy_kernel.data_factor_sweep."""
    y = np.ascontiguousarray(y, dtype=np.complex128)
    ext_h_prec = np.ascontiguousarray(ext_h_prec, dtype=np.float64)
    ext_h_pm = np.ascontiguousarray(ext_h_pm, dtype=np.complex128)
    log_ext_x = np.ascontiguousarray(log_ext_x, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.complex128)

    cdef Py_ssize_t K = ext_h_prec.shape[0]
    cdef Py_ssize_t T = ext_h_prec.shape[1]
    cdef Py_ssize_t N = ext_h_prec.shape[2]
    cdef Py_ssize_t S = points.shape[0]

    abs2_np = np.abs(points) ** 2
    cdef bint shared = (not per_symbol_cov) and (
        np.ptp(abs2_np) <= 1e-12 * abs2_np.max()
    )

    p_x = np.exp(log_ext_x)
    m_x_np = p_x @ points
    r_x_np = p_x @ abs2_np
    tau_x_np = np.maximum(r_x_np - np.abs(m_x_np) ** 2, 0.0)
    var_h_np = 1.0 / ext_h_prec
    m_h_np = ext_h_pm * var_h_np

    out_log_msg_x = np.empty((K, T, S), dtype=np.float64)
    out_prec = np.empty((K, T, N), dtype=np.float64)
    out_pm = np.empty((K, T, N), dtype=np.complex128)

    cdef cplx[:, ::1] yv = y
    cdef double[:, :, ::1] ehp = ext_h_prec
    cdef cplx[:, :, ::1] ehpm = ext_h_pm
    cdef double[:, :, ::1] lex = log_ext_x
    cdef cplx[::1] pts = points
    cdef double[::1] a2 = abs2_np
    cdef cplx[:, ::1] m_x = m_x_np
    cdef double[:, ::1] r_x = r_x_np
    cdef double[:, ::1] tau_x = tau_x_np
    cdef double[:, :, ::1] var_h = var_h_np
    cdef cplx[:, :, ::1] m_h = m_h_np
    cdef double[:, :, ::1] lmx = out_log_msg_x
    cdef double[:, :, ::1] oprec = out_prec
    cdef cplx[:, :, ::1] opm = out_pm

    # scratch
    mat_np = np.empty(N * N, dtype=np.complex128)
    mat2_np = np.empty(N * N, dtype=np.complex128)
    facb_np = np.empty(N * N, dtype=np.complex128)
    facl_np = np.empty(N * N, dtype=np.complex128)
    binv_np = np.empty(N * N, dtype=np.complex128)
    vec_np = np.empty(7 * N, dtype=np.complex128)
    mcond_np = np.empty(S * N, dtype=np.complex128)
    diagc_np = np.empty(S * N, dtype=np.float64)
    sbuf_np = np.empty(3 * S, dtype=np.float64)
    cdef cplx[::1] mat_v = mat_np, mat2_v = mat2_np, facb_v = facb_np
    cdef cplx[::1] facl_v = facl_np, binv_v = binv_np, vec_v = vec_np
    cdef cplx[::1] mcond_v = mcond_np
    cdef double[::1] diagc_v = diagc_np, sbuf_v = sbuf_np
    cdef cplx* mat = &mat_v[0]
    cdef cplx* mat2 = &mat2_v[0]
    cdef cplx* facb = &facb_v[0]
    cdef cplx* facl = &facl_v[0]
    cdef cplx* binv = &binv_v[0]
    cdef cplx* m_z = &vec_v[0]
    cdef cplx* resid0 = &vec_v[N]
    cdef cplx* u = &vec_v[2 * N]
    cdef cplx* rhs = &vec_v[3 * N]
    cdef cplx* ebuf = &vec_v[4 * N]
    cdef cplx* xbuf = &vec_v[5 * N]
    cdef cplx* rbuf = &vec_v[6 * N]
    cdef cplx* m_cond = &mcond_v[0]
    cdef double* diagc = &diagc_v[0]
    cdef double* loglik = &sbuf_v[0]
    cdef double* logw = &sbuf_v[S]
    cdef double* wgt = &sbuf_v[2 * S]

    dz_np = np.empty(N, dtype=np.float64)
    mmix_np = np.empty(N, dtype=np.complex128)
    sec_np = np.empty(N, dtype=np.float64)
    cdef double[::1] dz_v = dz_np
    cdef cplx[::1] mmix_v = mmix_np
    cdef double[::1] sec_v = sec_np
    cdef double* d_z = &dz_v[0]
    cdef cplx* m_mix = &mmix_v[0]
    cdef double* second = &sec_v[0]

    cdef double LNPI = log(M_PI)
    cdef Py_ssize_t t, k, i, n, m, s
    cdef cplx mxv, mhn, mc
    cdef double rxv, tauv, ld, q, mxl, tot, lse, var, pp, po
    cdef cplx pmo, mean
    cdef long clamps = 0
    cdef int bad = 0

    for t in range(T):
        for k in range(K):
            # interference moments of the other users, direct summation
            for i in range(N * N):
                mat[i] = 0
            for n in range(N):
                m_z[n] = 0
                d_z[n] = 0
            for i in range(K):
                if i == k:
                    continue
                mxv = m_x[i, t]
                rxv = r_x[i, t]
                tauv = tau_x[i, t]
                for n in range(N):
                    m_z[n] = m_z[n] + mxv * m_h[i, t, n]
                    d_z[n] = d_z[n] + rxv * var_h[i, t, n]
                for n in range(N):
                    mhn = tauv * m_h[i, t, n]
                    for m in range(N):
                        mat[n * N + m] = mat[n * N + m] + mhn * m_h[i, t, m].conjugate()
            for n in range(N):
                mat[n * N + n] = mat[n * N + n] + d_z[n] + sigma_v2

            if _factor(mat, facb, N, rel_jitter) != 0:
                bad = 1
                break
            _inv_from_chol(facb, N, ebuf, xbuf, binv)
            for n in range(N):
                resid0[n] = yv[t, n] - m_z[n]
            _chol_solve(facb, N, resid0, u)

            # symbol likelihoods
            if shared:
                for i in range(N * N):
                    mat2[i] = mat[i]
                for n in range(N):
                    mat2[n * N + n] = mat2[n * N + n] + a2[0] * var_h[k, t, n]
                if _factor(mat2, facl, N, rel_jitter) != 0:
                    bad = 1
                    break
                ld = _logdet_from_chol(facl, N)
                for s in range(S):
                    for n in range(N):
                        rbuf[n] = resid0[n] - pts[s] * m_h[k, t, n]
                    q = _quad_from_chol(facl, N, rbuf, xbuf)
                    loglik[s] = -q - (N * LNPI + ld)
            else:
                for s in range(S):
                    for i in range(N * N):
                        mat2[i] = mat[i]
                    for n in range(N):
                        mat2[n * N + n] = mat2[n * N + n] + a2[s] * var_h[k, t, n]
                    if _factor(mat2, facl, N, rel_jitter) != 0:
                        bad = 1
                        break
                    ld = _logdet_from_chol(facl, N)
                    for n in range(N):
                        rbuf[n] = resid0[n] - pts[s] * m_h[k, t, n]
                    q = _quad_from_chol(facl, N, rbuf, xbuf)
                    loglik[s] = -q - (N * LNPI + ld)
                if bad:
                    break

            mxl = loglik[0]
            for s in range(1, S):
                if loglik[s] > mxl:
                    mxl = loglik[s]
            tot = 0.0
            for s in range(S):
                tot += exp(loglik[s] - mxl)
            lse = mxl + log(tot)
            for s in range(S):
                lmx[k, t, s] = loglik[s] - lse

            # belief weights
            mxl = -1e308
            for s in range(S):
                logw[s] = lmx[k, t, s] + lex[k, t, s]
                if logw[s] > mxl:
                    mxl = logw[s]
            tot = 0.0
            for s in range(S):
                wgt[s] = exp(logw[s] - mxl)
                tot += wgt[s]
            for s in range(S):
                wgt[s] /= tot

            # symbol-conditional channel posteriors
            if shared:
                for i in range(N * N):
                    mat2[i] = a2[0] * binv[i]
                for n in range(N):
                    mat2[n * N + n] = mat2[n * N + n] + ehp[k, t, n]
                if _factor(mat2, facl, N, rel_jitter) != 0:
                    bad = 1
                    break
                for m in range(N):
                    for n in range(N):
                        ebuf[n] = 0
                    ebuf[m] = 1
                    _chol_solve(facl, N, ebuf, xbuf)
                    diagc[m] = xbuf[m].real
                for s in range(S):
                    for n in range(N):
                        diagc[s * N + n] = diagc[n]
                    for n in range(N):
                        rhs[n] = ehpm[k, t, n] + pts[s].conjugate() * u[n]
                    _chol_solve(facl, N, rhs, &m_cond[s * N])
            else:
                for s in range(S):
                    for i in range(N * N):
                        mat2[i] = a2[s] * binv[i]
                    for n in range(N):
                        mat2[n * N + n] = mat2[n * N + n] + ehp[k, t, n]
                    if _factor(mat2, facl, N, rel_jitter) != 0:
                        bad = 1
                        break
                    for m in range(N):
                        for n in range(N):
                            ebuf[n] = 0
                        ebuf[m] = 1
                        _chol_solve(facl, N, ebuf, xbuf)
                        diagc[s * N + m] = xbuf[m].real
                    for n in range(N):
                        rhs[n] = ehpm[k, t, n] + pts[s].conjugate() * u[n]
                    _chol_solve(facl, N, rhs, &m_cond[s * N])
                if bad:
                    break

            # mixture projection onto a diagonal Gaussian, then division
            for n in range(N):
                m_mix[n] = 0
                second[n] = 0
            for s in range(S):
                for n in range(N):
                    mc = m_cond[s * N + n]
                    m_mix[n] = m_mix[n] + wgt[s] * mc
                    second[n] += wgt[s] * (diagc[s * N + n] + _abs2(mc))
            for n in range(N):
                var = second[n] - _abs2(m_mix[n])
                if var < 1e-300:
                    var = 1e-300
                pp = 1.0 / var
                po = pp - ehp[k, t, n]
                pmo = m_mix[n] * pp - ehpm[k, t, n]
                if po < prec_floor:
                    if po != 0.0:
                        mean = pmo / po
                    else:
                        mean = m_mix[n]
                    po = prec_floor
                    pmo = prec_floor * mean
                    clamps += 1
                oprec[k, t, n] = po
                opm[k, t, n] = pmo
        if bad:
            break

    if bad:
        raise np.linalg.LinAlgError(
            "covariance not positive definite after jitter floor"
        )
    return out_log_msg_x, out_prec, out_pm, int(clamps)
