"""Mixed-collocation operators and boundary-condition handling.

The semi-discrete system is ``M du/dt + K' u = f + g(t)`` where
``K' = K_s P K_a``: ``K_a`` maps nodal values to nodal fluxes, ``K_s``
takes the collocated divergence of nodal fluxes, and ``P`` is identity
except on Neumann nodes where it carries the penalty projection
``(I + alpha n n^T)^-1``. ``g(t)`` is the penalty load from prescribed fluxes.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import basis as _basis
from .geometry import DIRICHLET, NEUMANN, find_supports

log = logging.getLogger(__name__)

PENALTY_BAND = (1e4, 1e7)


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class PenaltyConfig:
    alpha: float = 1e6

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"penalty factor must be positive, got {self.alpha}")
        lo, hi = PENALTY_BAND
        if not lo <= self.alpha <= hi:
            warnings.warn(
                f"penalty factor {self.alpha:g} is outside [{lo:g}, {hi:g}]",
                RuntimeWarning,
                stacklevel=3,
            )


@dataclass
class TransientProblem:
    """Coefficients, data and duration of ``c_rho u_t - div(D grad u) = f + r(t) u``.

    ``source(x, t)`` and ``dirichlet(x, t)`` take an ``(n, dim)`` array of
    points. ``neumann(x, t)`` returns the prescribed outward flux
    ``-n . D grad u``; ``None`` means insulated. ``reaction(t)`` is an
    optional scalar coefficient of a linear term treated explicitly.
    """

    c_rho: float
    conductivity: object
    initial: Callable
    t_final: float
    source: Callable | None = None
    reaction: Callable | None = None
    dirichlet: Callable | None = None
    neumann: Callable | None = None

    def __post_init__(self):
        if not self.c_rho > 0:
            raise ValueError("c_rho must be positive")
        if not self.t_final > 0:
            raise ValueError("t_final must be positive")
        check_conductivity(self.conductivity)


def check_conductivity(cond):
    c = np.asarray(cond, dtype=np.float64)
    if c.ndim == 0:
        if not c > 0:
            raise ValueError(f"conductivity must be positive, got {float(c)}")
        return
    mats = c.reshape(-1, *c.shape[-2:])
    if c.shape[-1] != c.shape[-2] or not np.allclose(mats, np.swapaxes(mats, 1, 2), atol=1e-14):
        raise ValueError("conductivity tensor must be square and symmetric")
    if np.linalg.eigvalsh(mats).min() <= 0:
        raise ValueError("conductivity tensor must be positive definite")


def _owners(shapes):
    return np.repeat(np.arange(len(shapes.indptr) - 1), np.diff(shapes.indptr))


def _csr(rows, cols, vals, shape):
    mat = sp.csr_matrix((vals, (rows, cols)), shape=shape)
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def assemble_flux_operator(cloud, shapes, conductivity=1.0):
    """``K_a`` (``dim*N x N``): rows ``dim*I + a`` give flux component ``a`` at node ``I``."""
    d = cloud.dim
    n = len(cloud)
    owner = _owners(shapes)
    cond = np.asarray(conductivity, dtype=np.float64)
    if cond.ndim == 0:
        flux = -cond * shapes.gradients
    elif cond.ndim == 2:
        flux = -shapes.gradients @ cond.T
    elif cond.ndim == 3 and len(cond) == n:
        flux = -np.einsum("kab,kb->ka", cond[owner], shapes.gradients)
    else:
        raise AssemblyError(f"conductivity of shape {cond.shape} does not fit {n} nodes in {d}D")
    rows = (d * owner[:, None] + np.arange(d)).ravel()
    cols = np.repeat(shapes.indices, d)
    return _csr(rows, cols, flux.ravel(), (d * n, n))


def assemble_divergence_operator(cloud, shapes):
    """``K_s`` (``N x dim*N``): row ``I`` collocates the divergence of nodal fluxes."""
    d = cloud.dim
    n = len(cloud)
    owner = _owners(shapes)
    rows = np.repeat(owner, d)
    cols = (d * shapes.indices[:, None] + np.arange(d)).ravel()
    return _csr(rows, cols, shapes.gradients.ravel(), (n, d * n))


def assemble_mass(cloud, shapes, c_rho=1.0):
    """Row-sum lumped mass ``c_rho * sum_i phi_i(x_I)`` as a diagonal CSR matrix."""
    n = len(cloud)
    diag = c_rho * np.bincount(_owners(shapes), weights=shapes.values, minlength=n)
    return sp.diags(diag, format="csr")


def _neumann_normals(cloud):
    neu = cloud.indices(NEUMANN)
    nrm = cloud.normals[neu]
    if len(neu):
        dev = np.abs(np.linalg.norm(nrm, axis=1) - 1.0)
        if np.any(dev > 1e-9):
            raise AssemblyError(f"Neumann node {neu[np.argmax(dev)]} has a non-unit normal")
    return neu, nrm


def penalty_projector(cloud, penalty):
    """Block-diagonal ``P``: ``(I + alpha n n^T)^-1 = I - alpha/(1+alpha) n n^T`` on Neumann nodes."""
    d = cloud.dim
    n = len(cloud)
    neu, nrm = _neumann_normals(cloud)
    blocks = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    nn = np.einsum("ka,kb->kab", nrm, nrm)
    # (I - n n^T) + n n^T / (1 + alpha) avoids cancellation in 1 - alpha/(1+alpha)
    blocks[neu] = (blocks[neu] - nn) + nn / (1.0 + penalty.alpha)
    return sp.block_diag(list(blocks), format="csr") if n < 64 else _block_diag_csr(blocks)


def _block_diag_csr(blocks):
    n, d, _ = blocks.shape
    rows = (d * np.arange(n)[:, None, None] + np.arange(d)[None, :, None]).repeat(d, axis=2)
    cols = (d * np.arange(n)[:, None, None] + np.arange(d)[None, None, :]).repeat(d, axis=1)
    return _csr(rows.ravel(), cols.ravel(), blocks.ravel(), (n * d, n * d))


def neumann_load_operator(Ks, cloud, penalty):
    """Sparse map from prescribed Neumann fluxes (ordered as ``cloud.indices(NEUMANN)``) to the rhs.

    Realizes ``-alpha K_s^1 Q^-1 N_r^T q_r`` for any ``q_r``.
    """
    d = cloud.dim
    neu, nrm = _neumann_normals(cloud)
    c = penalty.alpha / (1.0 + penalty.alpha)  # alpha Q^-1 n = alpha/(1+alpha) n
    rows = (d * neu[:, None] + np.arange(d)).ravel()
    cols = np.repeat(np.arange(len(neu)), d)
    lift = _csr(rows, cols, (c * nrm).ravel(), (d * len(cloud), len(neu)))
    return (-(Ks @ lift)).tocsr()


def apply_neumann_penalty(Ka, Ks, cloud, penalty, qbar=None):
    """Penalty-modified stiffness ``K'`` and the rhs correction for fluxes ``qbar``.

    ``qbar`` holds one prescribed outward flux per Neumann node, ordered as
    ``cloud.indices(NEUMANN)``; ``None`` means zero flux.
    """
    Kp = (Ks @ (penalty_projector(cloud, penalty) @ Ka)).tocsr()
    Kp.sum_duplicates()
    Kp.sort_indices()
    n_neu = len(cloud.indices(NEUMANN))
    if qbar is None or n_neu == 0 or not np.any(qbar):
        rhs = np.zeros(len(cloud))
    else:
        rhs = neumann_load_operator(Ks, cloud, penalty) @ np.asarray(qbar, dtype=np.float64)
    return Kp, rhs


def neumann_flux_residual(Ka, cloud, penalty, u, qbar=None):
    """``N_r q^1 - qbar`` at Neumann nodes for state ``u`` (penalized fluxes)."""
    d = cloud.dim
    neu, nrm = _neumann_normals(cloud)
    qbar = np.zeros(len(neu)) if qbar is None else np.asarray(qbar, dtype=np.float64)
    raw = (Ka @ u).reshape(-1, d)[neu]
    a = penalty.alpha
    # q = Q^-1 (raw + a n qbar), and n^T Q^-1 = n^T / (1 + a)
    normal_flux = ((raw * nrm).sum(axis=1) + a * qbar) / (1.0 + a)
    return normal_flux - qbar


def apply_dirichlet(u, cloud, ubar, t):
    """Overwrite Dirichlet nodes of ``u`` in place with ``ubar(x, t)``; returns ``u``."""
    idx = cloud.indices(DIRICHLET)
    if len(idx) == 0:
        return u
    if ubar is None:
        raise AssemblyError(f"{len(idx)} Dirichlet nodes but no prescribed values")
    vals = np.asarray(ubar(cloud.positions[idx], t), dtype=np.float64)
    vals = np.broadcast_to(vals, idx.shape)
    if not np.all(np.isfinite(vals)):
        bad = idx[np.flatnonzero(~np.isfinite(vals))[0]]
        raise AssemblyError(f"prescribed value undefined at Dirichlet node {bad}")
    u[idx] = vals
    return u


def check_operator(mat):
    """Assert CSR layout invariants: sorted unique columns per row, finite values."""
    mat = sp.csr_matrix(mat)
    if not np.all(np.isfinite(mat.data)):
        raise AssemblyError("operator holds non-finite values")
    for i in range(mat.shape[0]):
        cols = mat.indices[mat.indptr[i]:mat.indptr[i + 1]]
        if np.any(np.diff(cols) <= 0):
            raise AssemblyError(f"row {i} has unsorted or duplicate columns")
    return True


def dump_operator(mat, path):
    """Write ``rows cols nnz`` then one ``row col value`` line per stored entry."""
    mat = sp.csr_matrix(mat)
    coo = mat.tocoo()
    with open(path, "w") as fh:
        fh.write(f"{mat.shape[0]} {mat.shape[1]} {mat.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {float(v)!r}\n")


def load_operator(path):
    with open(path) as fh:
        nrows, ncols, nnz = (int(t) for t in fh.readline().split())
        data = np.loadtxt(fh, ndmin=2) if nnz else np.zeros((0, 3))
    if len(data) != nnz:
        raise AssemblyError(f"{path}: header says {nnz} entries, found {len(data)}")
    mat = sp.csr_matrix(
        (data[:, 2], (data[:, 0].astype(np.int64), data[:, 1].astype(np.int64))),
        shape=(nrows, ncols),
    )
    mat.sort_indices()
    return mat


@dataclass
class SemiDiscreteSystem:
    cloud: object
    supports: object
    shapes: object
    mass: np.ndarray
    stiffness: sp.csr_matrix
    flux_operator: sp.csr_matrix
    divergence_operator: sp.csr_matrix
    penalty: PenaltyConfig
    neumann_load: sp.csr_matrix | None
    timings: dict = field(default_factory=dict)


def build_system(cloud, conductivity=1.0, c_rho=1.0, method="rpi", a_c=1.5,
                 alpha_c=1.5, q_exp=1.03, penalty=None, backend=None):
    """Supports, shape functions and every operator for one cloud.

    ``timings`` on the result splits wall time into ``basis`` (support
    search and shape functions) and ``assembly`` (operator products).
    """
    penalty = penalty or PenaltyConfig()
    t0 = time.perf_counter()
    supports = find_supports(cloud, a_c, backend=backend)
    if method == "rpi":
        params = _basis.rpi_params_for(cloud, alpha_c, q_exp)
    elif method in ("mls", "mlpg_mc"):
        method = "mls"
        params = _basis.mls_params_for(cloud, a_c)
    else:
        raise ValueError(f"unknown method {method!r}")
    shapes = _basis.nodal_shape_functions(cloud, supports, method, params, backend=backend)
    t1 = time.perf_counter()
    Ka = assemble_flux_operator(cloud, shapes, conductivity)
    Ks = assemble_divergence_operator(cloud, shapes)
    mass = assemble_mass(cloud, shapes, c_rho).diagonal()
    Kp, _ = apply_neumann_penalty(Ka, Ks, cloud, penalty)
    load = neumann_load_operator(Ks, cloud, penalty) if len(cloud.indices(NEUMANN)) else None
    t2 = time.perf_counter()
    log.info("system: N=%d nnz(K')=%d basis %.3fs assembly %.3fs", len(cloud), Kp.nnz, t1 - t0, t2 - t1)
    return SemiDiscreteSystem(
        cloud, supports, shapes, mass, Kp, Ka, Ks, penalty, load,
        {"basis": t1 - t0, "assembly": t2 - t1},
    )
