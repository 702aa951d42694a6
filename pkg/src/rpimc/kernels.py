"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy
fallback takes over. Setting ``RPIMC_PURE_PYTHON=1`` forces the fallback.
"""

import logging
import os

import numpy as np

from . import _kernels_py

log = logging.getLogger(__name__)

if os.environ.get("RPIMC_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using numpy fallback")
        _impl = _kernels_py

BACKEND = _impl.BACKEND
_threads = 1


def set_threads(n):
    """Cap worker threads used inside compiled kernels."""
    global _threads
    _threads = max(1, int(n))


def get_backend(name=None):
    """Return the kernel module for ``name`` ('compiled' or 'python'); default is active."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def box_neighbors(points, half_width, bin_size, backend=None):
    return get_backend(backend).box_neighbors(_f64(points), float(half_width), float(bin_size))


def shape_output_ptr(sup_ptr, eval_ptr):
    n = np.diff(sup_ptr) * np.diff(eval_ptr)
    return np.concatenate(([0], np.cumsum(n))).astype(np.int64)


def rpi_shapes(points, sup_ptr, sup_idx, eval_ptr, eval_pts, rc, q, backend=None):
    out_ptr = shape_output_ptr(sup_ptr, eval_ptr)
    return get_backend(backend).rpi_shapes(
        _f64(points), _i64(sup_ptr), _i64(sup_idx), _i64(eval_ptr), _f64(eval_pts),
        out_ptr, float(rc), float(q), _threads,
    )


def mls_shapes(points, sup_ptr, sup_idx, eval_ptr, eval_pts, radius, backend=None):
    out_ptr = shape_output_ptr(sup_ptr, eval_ptr)
    return get_backend(backend).mls_shapes(
        _f64(points), _i64(sup_ptr), _i64(sup_idx), _i64(eval_ptr), _f64(eval_pts),
        out_ptr, float(radius), _threads,
    )


def _csr_arrays(mat):
    return (
        _i64(mat.indptr),
        np.ascontiguousarray(mat.indices, dtype=np.int32),
        _f64(mat.data),
    )


def gerschgorin_denominators(mat, backend=None):
    return get_backend(backend).gerschgorin_denominators(*_csr_arrays(mat))


class EulerStepper:
    """Fused ``u + dt * M^-1 (rhs - K u)`` bound to one CSR operator."""

    def __init__(self, mat, mass_diag, backend=None):
        self._impl = get_backend(backend)
        self._arrays = _csr_arrays(mat)
        self._inv_mass = _f64(1.0 / np.asarray(mass_diag))

    def __call__(self, u, rhs, dt, out):
        self._impl.euler_update(*self._arrays, u, rhs, self._inv_mass, float(dt), out, _threads)
        return out


def aliev_panfilov(v, w, stim, nsub, dt_sub, params, backend=None):
    get_backend(backend).aliev_panfilov(
        v, w, _f64(stim), int(nsub), float(dt_sub),
        params.v_rest, params.v_amp, params.tau, params.k, params.a,
        params.eps0, params.mu1, params.mu2, _threads,
    )
