# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Signatures mirror ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport parallel, prange
from libc.math cimport fabs, floor, pow, sqrt
from libc.stdlib cimport free, malloc
from scipy.linalg.cython_lapack cimport dgecon, dgetrf, dgetrs

cnp.import_array()

BACKEND = "compiled"


# ---------------------------------------------------------------- neighbors

def box_neighbors(const double[:, ::1] points, double half_width, double bin_size):
    cdef Py_ssize_t n = points.shape[0]
    cdef int d = <int>points.shape[1]
    cdef Py_ssize_t i, j, k, c, b, cnt, pos
    cdef int ax
    cdef double lo[3]
    cdef long nb[3]
    cdef long reach = <long>floor(half_width / bin_size) + 1
    cdef double hi
    for ax in range(3):
        lo[ax] = 0.0
        nb[ax] = 1
    for ax in range(d):
        lo[ax] = points[0, ax]
        hi = points[0, ax]
        for i in range(n):
            if points[i, ax] < lo[ax]:
                lo[ax] = points[i, ax]
            if points[i, ax] > hi:
                hi = points[i, ax]
        nb[ax] = <long>floor((hi - lo[ax]) / bin_size) + 1

    cdef long nbins = nb[0] * nb[1] * nb[2]
    cdef cnp.int64_t[:, ::1] coord = np.zeros((n, 3), dtype=np.int64)
    cdef cnp.int64_t[::1] start = np.zeros(nbins + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] order = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] fill = np.zeros(nbins, dtype=np.int64)
    cdef long bx, by, bz, lin
    for i in range(n):
        for ax in range(d):
            c = <long>floor((points[i, ax] - lo[ax]) / bin_size)
            if c >= nb[ax]:
                c = nb[ax] - 1
            coord[i, ax] = c
        lin = (coord[i, 0] * nb[1] + coord[i, 1]) * nb[2] + coord[i, 2]
        start[lin + 1] += 1
    for b in range(nbins):
        start[b + 1] += start[b]
    for i in range(n):
        lin = (coord[i, 0] * nb[1] + coord[i, 1]) * nb[2] + coord[i, 2]
        order[start[lin] + fill[lin]] = i
        fill[lin] += 1

    cdef cnp.int64_t[::1] counts = np.zeros(n + 1, dtype=np.int64)
    cdef int ok
    cdef long x0, x1, y0, y1, z0, z1
    # pass 1 counts, pass 2 fills
    cdef int sweep
    cdef cnp.int64_t[::1] indices = np.empty(0, dtype=np.int64)
    for sweep in range(2):
        for i in range(n):
            pos = counts[i]
            x0 = max(coord[i, 0] - reach, 0); x1 = min(coord[i, 0] + reach, nb[0] - 1)
            y0 = max(coord[i, 1] - reach, 0); y1 = min(coord[i, 1] + reach, nb[1] - 1)
            z0 = max(coord[i, 2] - reach, 0); z1 = min(coord[i, 2] + reach, nb[2] - 1)
            cnt = 0
            for bx in range(x0, x1 + 1):
                for by in range(y0, y1 + 1):
                    for bz in range(z0, z1 + 1):
                        lin = (bx * nb[1] + by) * nb[2] + bz
                        for k in range(start[lin], start[lin + 1]):
                            j = order[k]
                            ok = 1
                            for ax in range(d):
                                if fabs(points[j, ax] - points[i, ax]) > half_width:
                                    ok = 0
                                    break
                            if ok:
                                if sweep == 1:
                                    indices[pos + cnt] = j
                                cnt += 1
            if sweep == 0:
                counts[i + 1] = cnt
        if sweep == 0:
            for i in range(n):
                counts[i + 1] += counts[i]
            indices = np.empty(counts[n], dtype=np.int64)
    indptr = np.asarray(counts)
    out = np.asarray(indices)
    for i in range(n):
        out[indptr[i]:indptr[i + 1]].sort()
    return indptr, out


# ------------------------------------------------------------ shape functions

cdef inline double _one_norm(double* a, int sz) noexcept nogil:
    cdef int i, j
    cdef double s, best = 0.0
    for j in range(sz):
        s = 0.0
        for i in range(sz):
            s += fabs(a[j * sz + i])
        if s > best:
            best = s
    return best


def rpi_shapes(const double[:, ::1] points,
               const cnp.int64_t[::1] sup_ptr,
               const cnp.int64_t[::1] sup_idx,
               const cnp.int64_t[::1] eval_ptr,
               const double[:, ::1] eval_pts,
               const cnp.int64_t[::1] out_ptr,
               double rc, double q, int nthreads=1):
    cdef Py_ssize_t nsup = sup_ptr.shape[0] - 1
    cdef int d = <int>points.shape[1]
    cdef int m = d + 1
    cdef Py_ssize_t total = out_ptr[nsup]
    phi_arr = np.zeros(total, dtype=np.float64)
    grad_arr = np.zeros((total, d), dtype=np.float64)
    rcond_arr = np.zeros(nsup, dtype=np.float64)
    cdef double[::1] phi = phi_arr
    cdef double[:, ::1] grad = grad_arr
    cdef double[::1] rcond = rcond_arr

    cdef int maxn = 0, maxe = 0
    cdef Py_ssize_t s
    for s in range(nsup):
        if sup_ptr[s + 1] - sup_ptr[s] > maxn:
            maxn = <int>(sup_ptr[s + 1] - sup_ptr[s])
        if eval_ptr[s + 1] - eval_ptr[s] > maxe:
            maxe = <int>(eval_ptr[s + 1] - eval_ptr[s])
    cdef int maxsz = maxn + m
    cdef int maxcols = maxe * (d + 1)
    cdef double rc2 = rc * rc

    cdef double* G
    cdef double* B
    cdef double* work
    cdef int* ipiv
    cdef int* iwork
    cdef int n, sz, ncols, ne, i, j, k, e, col, info, a
    cdef double dist2, diff, base, anorm, rc_s
    cdef double* ctr
    cdef double* xe
    cdef char norm1 = b'1'
    cdef char trans = b'N'
    cdef Py_ssize_t o

    with nogil, parallel(num_threads=nthreads):
        G = <double*>malloc(maxsz * maxsz * sizeof(double))
        B = <double*>malloc(maxsz * maxcols * sizeof(double))
        work = <double*>malloc(4 * maxsz * sizeof(double))
        ipiv = <int*>malloc(maxsz * sizeof(int))
        iwork = <int*>malloc(maxsz * sizeof(int))
        ctr = <double*>malloc(3 * sizeof(double))
        xe = <double*>malloc(3 * sizeof(double))
        for s in prange(nsup, schedule='static'):
            n = <int>(sup_ptr[s + 1] - sup_ptr[s])
            ne = <int>(eval_ptr[s + 1] - eval_ptr[s])
            sz = n + m
            if ne == 0:
                continue
            # polynomial basis is shifted to the first evaluation point
            for a in range(d):
                ctr[a] = eval_pts[eval_ptr[s], a]
            for j in range(sz * sz):
                G[j] = 0.0
            for i in range(n):
                for j in range(i, n):
                    dist2 = 0.0
                    for a in range(d):
                        diff = points[sup_idx[sup_ptr[s] + i], a] - points[sup_idx[sup_ptr[s] + j], a]
                        dist2 = dist2 + diff * diff
                    base = pow(dist2 + rc2, q)
                    G[j * sz + i] = base
                    G[i * sz + j] = base
                G[n * sz + i] = 1.0
                G[i * sz + n] = 1.0
                for a in range(d):
                    diff = points[sup_idx[sup_ptr[s] + i], a] - ctr[a]
                    G[(n + 1 + a) * sz + i] = diff
                    G[i * sz + n + 1 + a] = diff
            anorm = _one_norm(G, sz)
            dgetrf(&sz, &sz, G, &sz, ipiv, &info)
            if info != 0:
                rcond[s] = 0.0
                continue
            dgecon(&norm1, &sz, G, &sz, &anorm, &rc_s, work, iwork, &info)
            rcond[s] = rc_s
            ncols = ne * (d + 1)
            for j in range(sz * ncols):
                B[j] = 0.0
            for e in range(ne):
                for a in range(d):
                    xe[a] = eval_pts[eval_ptr[s] + e, a]
                col = e * (d + 1)
                for i in range(n):
                    dist2 = 0.0
                    for a in range(d):
                        diff = xe[a] - points[sup_idx[sup_ptr[s] + i], a]
                        dist2 = dist2 + diff * diff
                    B[col * sz + i] = pow(dist2 + rc2, q)
                    base = 2.0 * q * pow(dist2 + rc2, q - 1.0)
                    for a in range(d):
                        diff = xe[a] - points[sup_idx[sup_ptr[s] + i], a]
                        B[(col + 1 + a) * sz + i] = base * diff
                B[col * sz + n] = 1.0
                for a in range(d):
                    B[col * sz + n + 1 + a] = xe[a] - ctr[a]
                    B[(col + 1 + a) * sz + n + 1 + a] = 1.0
            dgetrs(&trans, &sz, &ncols, G, &sz, ipiv, B, &sz, &info)
            for e in range(ne):
                col = e * (d + 1)
                o = out_ptr[s] + e * n
                for i in range(n):
                    phi[o + i] = B[col * sz + i]
                    for a in range(d):
                        grad[o + i, a] = B[(col + 1 + a) * sz + i]
        free(G)
        free(B)
        free(work)
        free(ipiv)
        free(iwork)
        free(ctr)
        free(xe)
    return phi_arr, grad_arr, rcond_arr


cdef inline void _quartic(double s, double* w, double* dw) noexcept nogil:
    if s >= 1.0:
        w[0] = 0.0
        dw[0] = 0.0
    else:
        w[0] = 1.0 - 6.0 * s * s + 8.0 * s * s * s - 3.0 * s * s * s * s
        dw[0] = -12.0 * s + 24.0 * s * s - 12.0 * s * s * s


def mls_shapes(const double[:, ::1] points,
               const cnp.int64_t[::1] sup_ptr,
               const cnp.int64_t[::1] sup_idx,
               const cnp.int64_t[::1] eval_ptr,
               const double[:, ::1] eval_pts,
               const cnp.int64_t[::1] out_ptr,
               double radius, int nthreads=1):
    cdef Py_ssize_t nsup = sup_ptr.shape[0] - 1
    cdef int d = <int>points.shape[1]
    cdef int m = d + 1
    cdef Py_ssize_t total = out_ptr[nsup]
    phi_arr = np.zeros(total, dtype=np.float64)
    grad_arr = np.zeros((total, d), dtype=np.float64)
    rcond_arr = np.zeros(nsup, dtype=np.float64)
    cdef double[::1] phi = phi_arr
    cdef double[:, ::1] grad = grad_arr
    cdef double[::1] rcond = rcond_arr

    cdef int maxn = 0
    cdef Py_ssize_t s
    for s in range(nsup):
        if sup_ptr[s + 1] - sup_ptr[s] > maxn:
            maxn = <int>(sup_ptr[s + 1] - sup_ptr[s])

    cdef double* A
    cdef double* rhs
    cdef double* w
    cdef double* dw
    cdef double* pp
    cdef double* work
    cdef int* ipiv
    cdef int* iwork
    cdef int n, ne, i, j, k, e, a, b, info, nrhs
    cdef double dist, diff, sv, wv, dwv, anorm, rc_s, acc
    cdef double* xe
    cdef char norm1 = b'1'
    cdef char trans = b'N'
    cdef Py_ssize_t o, node

    with nogil, parallel(num_threads=nthreads):
        A = <double*>malloc(m * m * sizeof(double))
        rhs = <double*>malloc(m * (d + 1) * sizeof(double))
        w = <double*>malloc(maxn * sizeof(double))
        dw = <double*>malloc(maxn * 3 * sizeof(double))
        pp = <double*>malloc(maxn * 4 * sizeof(double))
        work = <double*>malloc(4 * m * sizeof(double))
        ipiv = <int*>malloc(m * sizeof(int))
        iwork = <int*>malloc(m * sizeof(int))
        xe = <double*>malloc(3 * sizeof(double))
        for s in prange(nsup, schedule='static'):
            n = <int>(sup_ptr[s + 1] - sup_ptr[s])
            ne = <int>(eval_ptr[s + 1] - eval_ptr[s])
            rcond[s] = 1.0
            for e in range(ne):
                for a in range(d):
                    xe[a] = eval_pts[eval_ptr[s] + e, a]
                # basis shifted to the evaluation point: p(x) = [1, 0, ...]
                for i in range(n):
                    node = sup_idx[sup_ptr[s] + i]
                    dist = 0.0
                    pp[i * 4] = 1.0
                    for a in range(d):
                        diff = points[node, a] - xe[a]
                        pp[i * 4 + 1 + a] = diff
                        dist = dist + diff * diff
                    dist = sqrt(dist)
                    _quartic(dist / radius, &wv, &dwv)
                    w[i] = wv
                    for a in range(d):
                        if dist > 0.0:
                            # d/dx_eval of s = (x_eval - x_i) / (|.| R)
                            dw[i * 3 + a] = dwv * (-pp[i * 4 + 1 + a]) / (dist * radius)
                        else:
                            dw[i * 3 + a] = 0.0
                for j in range(m * m):
                    A[j] = 0.0
                for i in range(n):
                    for a in range(m):
                        for b in range(m):
                            A[b * m + a] = A[b * m + a] + w[i] * pp[i * 4 + a] * pp[i * 4 + b]
                anorm = _one_norm(A, m)
                dgetrf(&m, &m, A, &m, ipiv, &info)
                if info != 0:
                    rcond[s] = 0.0
                    break
                dgecon(&norm1, &m, A, &m, &anorm, &rc_s, work, iwork, &info)
                if rc_s < rcond[s]:
                    rcond[s] = rc_s
                # gamma = A^-1 p
                for a in range(m):
                    rhs[a] = 0.0
                rhs[0] = 1.0
                nrhs = 1
                dgetrs(&trans, &m, &nrhs, A, &m, ipiv, rhs, &m, &info)
                # dgamma_k = A^-1 (dp_k - dA_k gamma); dp_k = e_{k+1} - 0 (shift is constant)
                for k in range(d):
                    for a in range(m):
                        acc = 0.0
                        for i in range(n):
                            sv = 0.0
                            for b in range(m):
                                sv = sv + pp[i * 4 + b] * rhs[b]
                            acc = acc + dw[i * 3 + k] * pp[i * 4 + a] * sv
                        rhs[(k + 1) * m + a] = -acc
                    rhs[(k + 1) * m + k + 1] = rhs[(k + 1) * m + k + 1] + 1.0
                nrhs = d
                dgetrs(&trans, &m, &nrhs, A, &m, ipiv, &rhs[m], &m, &info)
                o = out_ptr[s] + e * n
                for i in range(n):
                    sv = 0.0
                    for b in range(m):
                        sv = sv + pp[i * 4 + b] * rhs[b]
                    phi[o + i] = w[i] * sv
                    for k in range(d):
                        acc = 0.0
                        for b in range(m):
                            acc = acc + pp[i * 4 + b] * rhs[(k + 1) * m + b]
                        grad[o + i, k] = acc * w[i] + sv * dw[i * 3 + k]
        free(A)
        free(rhs)
        free(w)
        free(dw)
        free(pp)
        free(work)
        free(ipiv)
        free(iwork)
        free(xe)
    return phi_arr, grad_arr, rcond_arr


# ----------------------------------------------------------- time stepping

def gerschgorin_denominators(const cnp.int64_t[::1] indptr,
                             const cnp.int32_t[::1] indices,
                             const double[::1] data):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] den = out
    cdef Py_ssize_t i, k
    cdef double diag, off
    for i in range(n):
        diag = 0.0
        off = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            if indices[k] == i:
                diag = data[k]
            else:
                off += fabs(data[k])
        den[i] = diag + off
    return out


def euler_update(const cnp.int64_t[::1] indptr,
                 const cnp.int32_t[::1] indices,
                 const double[::1] data,
                 const double[::1] u,
                 const double[::1] rhs,
                 const double[::1] inv_mass,
                 double dt,
                 double[::1] out,
                 int nthreads=1):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t i, k
    cdef double acc
    for i in prange(n, nogil=True, schedule='static', num_threads=nthreads):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc = acc + data[k] * u[indices[k]]
        out[i] = u[i] + dt * inv_mass[i] * (rhs[i] - acc)


# -------------------------------------------------------------- ionic model

def aliev_panfilov(double[::1] v, double[::1] w, const double[::1] stim,
                   int nsub, double dt_sub,
                   double v_rest, double v_amp, double tau,
                   double k, double a, double eps0, double mu1, double mu2,
                   int nthreads=1):
    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t i
    cdef int it
    cdef double u, g, du, dg, eps, h = dt_sub / tau
    for i in prange(n, nogil=True, schedule='static', num_threads=nthreads):
        u = (v[i] - v_rest) / v_amp
        g = w[i]
        for it in range(nsub):
            du = k * u * (u - a) * (1.0 - u) - u * g
            eps = eps0 + mu1 * g / (u + mu2)
            dg = eps * (-g - k * u * (u - a - 1.0))
            u = u + h * du + dt_sub * stim[i] / v_amp
            g = g + h * dg
        v[i] = v_rest + v_amp * u
        w[i] = g
