"""RPI (multiquadric + linear polynomial) and MLS shape functions.

Both bases return values and first derivatives over a support domain. The
heavy lifting for whole clouds happens in :mod:`rpimc.kernels`; the single
point builders here route through the same kernels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

RCOND_MIN = 1e-14


class ShapeFunctionError(np.linalg.LinAlgError):
    """Moment matrix is singular or too ill-conditioned at a node."""


@dataclass(frozen=True)
class RpiParams:
    """Multiquadric shape parameters; ``r_c = alpha_c * d_c``."""

    d_c: float
    alpha_c: float = 1.5
    q_exp: float = 1.03

    def __post_init__(self):
        if not (self.alpha_c > 0 and self.d_c > 0):
            raise ValueError("alpha_c and d_c must be positive")
        if not self.q_exp > 0 or float(self.q_exp).is_integer():
            raise ValueError(f"q_exp must be positive and non-integer, got {self.q_exp}")

    @property
    def r_c(self):
        return self.alpha_c * self.d_c


@dataclass(frozen=True)
class MlsParams:
    support_radius: float
    basis_order: int = 1

    def __post_init__(self):
        if not self.support_radius > 0:
            raise ValueError("support_radius must be positive")
        if self.basis_order != 1:
            raise ValueError("only the linear MLS basis is available")


def rpi_params_for(cloud, alpha_c=1.5, q_exp=1.03):
    return RpiParams(d_c=cloud.spacing, alpha_c=alpha_c, q_exp=q_exp)


def mls_params_for(cloud, a_c):
    # circumscribes the search box so every box neighbor has positive weight
    return MlsParams(support_radius=a_c * cloud.spacing * np.sqrt(cloud.dim))


@dataclass(frozen=True)
class ShapeFunctionSet:
    values: np.ndarray
    gradients: np.ndarray
    support: object

    def interpolate(self, nodal):
        return self.values @ np.asarray(nodal)[self.support.neighbor_indices]

    def gradient(self, nodal):
        return np.asarray(nodal)[self.support.neighbor_indices] @ self.gradients


def mq_rbf(disp, r_c, q_exp):
    """Multiquadric ``(|disp|^2 + r_c^2)^q`` and its gradient in the evaluation point.

    ``disp`` holds ``x - x_i`` along the last axis.
    """
    disp = np.asarray(disp, dtype=np.float64)
    base = (disp**2).sum(axis=-1) + r_c * r_c
    value = base**q_exp
    grad = 2.0 * q_exp * (base ** (q_exp - 1.0))[..., None] * disp
    return value, grad


def _check_rcond(rcond, owners, kind):
    bad = np.flatnonzero(~(rcond >= RCOND_MIN))
    if len(bad):
        node = owners[bad[0]]
        raise ShapeFunctionError(
            f"{kind} moment matrix at node {node} is singular or ill-conditioned "
            f"(rcond={rcond[bad[0]]:.3e}); {len(bad)} support(s) affected"
        )


def _single(point, cloud, support, kind, param):
    idx = np.asarray(support.neighbor_indices, dtype=np.int64)
    sup_ptr = np.array([0, len(idx)], dtype=np.int64)
    eval_ptr = np.array([0, 1], dtype=np.int64)
    pt = np.asarray(point, dtype=np.float64).reshape(1, -1)
    if kind == "rpi":
        phi, grad, rcond = kernels.rpi_shapes(cloud.positions, sup_ptr, idx, eval_ptr, pt, param.r_c, param.q_exp)
    else:
        phi, grad, rcond = kernels.mls_shapes(cloud.positions, sup_ptr, idx, eval_ptr, pt, param.support_radius)
    _check_rcond(rcond, [support.center_index], kind.upper())
    return ShapeFunctionSet(phi, grad, support)


def build_rpi(point, cloud, support, params):
    """RPI shape functions and gradients at ``point`` over ``support``."""
    if len(support) < cloud.dim + 2:
        raise ShapeFunctionError(f"support of node {support.center_index} has {len(support)} nodes")
    return _single(point, cloud, support, "rpi", params)


def build_mls(point, cloud, support, params):
    """MLS (linear basis, quartic spline weight) shape functions at ``point``."""
    return _single(point, cloud, support, "mls", params)


@dataclass(frozen=True, eq=False)
class NodalShapes:
    """Shape functions evaluated at every node, aligned with the support CSR.

    ``values[indptr[I]:indptr[I+1]]`` are ``phi_i(x_I)`` for the neighbors
    ``indices[indptr[I]:indptr[I+1]]`` of node ``I``; ``gradients`` has one
    extra trailing axis of length ``dim``.
    """

    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    gradients: np.ndarray
    method: str

    def node(self, i):
        sl = slice(self.indptr[i], self.indptr[i + 1])
        return self.indices[sl], self.values[sl], self.gradients[sl]


def nodal_shape_functions(cloud, supports, method="rpi", params=None, backend=None):
    """Evaluate the chosen basis at every node of ``cloud``.

    Parameters
    ----------
    method : {'rpi', 'mls'}
    params : RpiParams or MlsParams
        Defaults: RPI with ``d_c = h``; MLS radius circumscribing the support box.
    """
    n = len(cloud)
    eval_ptr = np.arange(n + 1, dtype=np.int64)
    if method == "rpi":
        params = params or rpi_params_for(cloud)
        phi, grad, rcond = kernels.rpi_shapes(
            cloud.positions, supports.indptr, supports.indices, eval_ptr, cloud.positions,
            params.r_c, params.q_exp, backend=backend,
        )
    elif method == "mls":
        if params is None:
            raise ValueError("MLS needs MlsParams (see mls_params_for)")
        phi, grad, rcond = kernels.mls_shapes(
            cloud.positions, supports.indptr, supports.indices, eval_ptr, cloud.positions,
            params.support_radius, backend=backend,
        )
    else:
        raise ValueError(f"unknown basis {method!r}")
    _check_rcond(rcond, np.arange(n), method.upper())
    return NodalShapes(supports.indptr, supports.indices, phi, grad, method)
