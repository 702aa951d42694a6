"""Pure numpy/scipy versions of the hot loops in ``_kernels.pyx``.

Every function here has the same signature and output layout as its
compiled twin, so either module can back :mod:`rpimc.kernels`.
"""

import numpy as np
import scipy.linalg as la
from scipy.linalg import lapack

BACKEND = "python"


def box_neighbors(points, half_width, bin_size):
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    nb = (np.floor((hi - lo) / bin_size) + 1).astype(np.int64)
    coord = np.minimum(np.floor((points - lo) / bin_size).astype(np.int64), nb - 1)
    strides = np.ones(d, dtype=np.int64)
    for ax in range(d - 2, -1, -1):
        strides[ax] = strides[ax + 1] * nb[ax + 1]
    lin = coord @ strides
    order = np.argsort(lin, kind="stable")
    counts = np.bincount(lin, minlength=int(np.prod(nb)))
    start = np.concatenate(([0], np.cumsum(counts)))

    reach = int(np.floor(half_width / bin_size)) + 1
    offsets = np.stack(
        np.meshgrid(*([np.arange(-reach, reach + 1)] * d), indexing="ij"), -1
    ).reshape(-1, d)
    rows, cols = [], []
    for off in offsets:
        nbr = coord + off
        valid = np.all((nbr >= 0) & (nbr < nb), axis=1)
        src = np.flatnonzero(valid)
        blin = nbr[valid] @ strides
        cnt = counts[blin]
        tot = int(cnt.sum())
        if tot == 0:
            continue
        rep = np.repeat(src, cnt)
        first = np.repeat(start[blin], cnt)
        within = np.arange(tot) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        cand = order[first + within]
        keep = np.all(np.abs(points[cand] - points[rep]) <= half_width, axis=1)
        rows.append(rep[keep])
        cols.append(cand[keep])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    perm = np.lexsort((cols, rows))
    rows, cols = rows[perm], cols[perm]
    indptr = np.concatenate(([0], np.cumsum(np.bincount(rows, minlength=n)))).astype(np.int64)
    return indptr, cols.astype(np.int64)


def rpi_shapes(points, sup_ptr, sup_idx, eval_ptr, eval_pts, out_ptr, rc, q, nthreads=1):
    points = np.asarray(points)
    d = points.shape[1]
    m = d + 1
    total = int(out_ptr[-1])
    phi = np.zeros(total)
    grad = np.zeros((total, d))
    nsup = len(sup_ptr) - 1
    rcond = np.zeros(nsup)
    rc2 = rc * rc
    for s in range(nsup):
        e0, e1 = eval_ptr[s], eval_ptr[s + 1]
        if e1 == e0:
            continue
        X = points[sup_idx[sup_ptr[s]:sup_ptr[s + 1]]]
        n = len(X)
        ctr = eval_pts[e0]
        G = np.zeros((n + m, n + m))
        G[:n, :n] = (((X[:, None, :] - X[None, :, :]) ** 2).sum(-1) + rc2) ** q
        P = np.hstack([np.ones((n, 1)), X - ctr])
        G[:n, n:] = P
        G[n:, :n] = P.T
        anorm = np.abs(G).sum(axis=0).max()
        try:
            lu = la.lu_factor(G, check_finite=False)
        except la.LinAlgError:
            continue
        if np.any(np.diag(lu[0]) == 0.0):
            continue
        rcond[s] = lapack.dgecon(lu[0], anorm, norm="1")[0]
        xe = eval_pts[e0:e1]
        disp = xe[:, None, :] - X[None, :, :]
        base = (disp ** 2).sum(-1) + rc2
        rhs = np.zeros((e1 - e0, d + 1, n + m))
        rhs[:, 0, :n] = base ** q
        rhs[:, 1:, :n] = np.moveaxis(2.0 * q * (base ** (q - 1.0))[..., None] * disp, -1, 1)
        rhs[:, 0, n] = 1.0
        rhs[:, 0, n + 1:] = xe - ctr
        rhs[:, 1:, n + 1:] = np.eye(d)
        sol = la.lu_solve(lu, rhs.reshape(-1, n + m).T, check_finite=False)
        sol = sol.T.reshape(e1 - e0, d + 1, n + m)
        o = out_ptr[s]
        phi[o:o + (e1 - e0) * n] = sol[:, 0, :n].ravel()
        grad[o:o + (e1 - e0) * n] = np.moveaxis(sol[:, 1:, :n], 1, 2).reshape(-1, d)
    return phi, grad, rcond


def _quartic(s):
    inside = s < 1.0
    w = np.where(inside, 1.0 - 6.0 * s**2 + 8.0 * s**3 - 3.0 * s**4, 0.0)
    dw = np.where(inside, -12.0 * s + 24.0 * s**2 - 12.0 * s**3, 0.0)
    return w, dw


def mls_shapes(points, sup_ptr, sup_idx, eval_ptr, eval_pts, out_ptr, radius, nthreads=1):
    points = np.asarray(points)
    d = points.shape[1]
    m = d + 1
    total = int(out_ptr[-1])
    phi = np.zeros(total)
    grad = np.zeros((total, d))
    nsup = len(sup_ptr) - 1
    rcond = np.ones(nsup)
    for s in range(nsup):
        X = points[sup_idx[sup_ptr[s]:sup_ptr[s + 1]]]
        n = len(X)
        for e in range(eval_ptr[s + 1] - eval_ptr[s]):
            xe = eval_pts[eval_ptr[s] + e]
            rel = X - xe
            dist = np.sqrt((rel**2).sum(-1))
            w, dwds = _quartic(dist / radius)
            with np.errstate(divide="ignore", invalid="ignore"):
                dw = np.where(dist[:, None] > 0.0, dwds[:, None] * (-rel) / (dist[:, None] * radius), 0.0)
            P = np.hstack([np.ones((n, 1)), rel])
            A = (P.T * w) @ P
            anorm = np.abs(A).sum(axis=0).max()
            lu = la.lu_factor(A, check_finite=False)
            if np.any(np.diag(lu[0]) == 0.0):
                rcond[s] = 0.0
                break
            rcond[s] = min(rcond[s], lapack.dgecon(lu[0], anorm, norm="1")[0])
            p0 = np.zeros(m)
            p0[0] = 1.0
            gamma = la.lu_solve(lu, p0, check_finite=False)
            pg = P @ gamma
            rhs = np.zeros((m, d))
            for k in range(d):
                rhs[:, k] = -(P.T * dw[:, k]) @ pg
                rhs[k + 1, k] += 1.0
            dgamma = la.lu_solve(lu, rhs, check_finite=False)
            o = out_ptr[s] + e * n
            phi[o:o + n] = w * pg
            grad[o:o + n] = (P @ dgamma) * w[:, None] + pg[:, None] * dw
    return phi, grad, rcond


def gerschgorin_denominators(indptr, indices, data):
    n = len(indptr) - 1
    rows = np.repeat(np.arange(n), np.diff(indptr))
    on_diag = indices == rows
    diag = np.zeros(n)
    diag[rows[on_diag]] = data[on_diag]
    off = np.zeros(n)
    np.add.at(off, rows[~on_diag], np.abs(data[~on_diag]))
    return diag + off


def euler_update(indptr, indices, data, u, rhs, inv_mass, dt, out, nthreads=1):
    n = len(indptr) - 1
    ku = np.add.reduceat(data * u[indices], indptr[:-1]) if len(data) else np.zeros(n)
    ku[np.diff(indptr) == 0] = 0.0
    out[:] = u + dt * inv_mass * (rhs - ku)


def aliev_panfilov(v, w, stim, nsub, dt_sub, v_rest, v_amp, tau, k, a, eps0, mu1, mu2, nthreads=1):
    u = (v - v_rest) / v_amp
    g = w.copy()
    h = dt_sub / tau
    for _ in range(nsub):
        du = k * u * (u - a) * (1.0 - u) - u * g
        eps = eps0 + mu1 * g / (u + mu2)
        dg = eps * (-g - k * u * (u - a - 1.0))
        u = u + h * du + dt_sub * stim / v_amp
        g = g + h * dg
    v[:] = v_rest + v_amp * u
    w[:] = g
