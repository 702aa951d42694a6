"""Gerschgörin-bounded stable step and explicit forward Euler marching."""

from __future__ import annotations

import logging
import sys
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels

log = logging.getLogger(__name__)


class StabilityError(ValueError):
    """No positive Gerschgörin row bound exists."""


class NumericalInstability(RuntimeError):
    def __init__(self, step, t):
        super().__init__(f"non-finite state after step {step} (t={t:.6g})")
        self.step = step
        self.t = t


@dataclass(frozen=True)
class StepBound:
    dt_s: float
    limiting_row: int
    skipped_rows: np.ndarray


def _mass_diag(mass):
    if sp.issparse(mass):
        off = mass - sp.diags(mass.diagonal())
        if off.count_nonzero():
            raise ValueError("mass operator must be diagonal")
        mass = mass.diagonal()
    m = np.asarray(mass, dtype=np.float64)
    if m.ndim != 1 or np.any(~(m > 0)):
        raise ValueError("mass diagonal must be a positive vector")
    return m


def gerschgorin_bound(mass, K, backend=None):
    """Row bounds ``m_ii / (k_ii + sum_{j!=i} |k_ij|)`` with diagnostics.

    Rows with a non-positive denominator are left out of the minimum and
    listed in ``skipped_rows``.
    """
    m = _mass_diag(mass)
    K = sp.csr_matrix(K)
    if K.shape != (len(m), len(m)):
        raise ValueError(f"K' has shape {K.shape}, mass has {len(m)} rows")
    den = kernels.gerschgorin_denominators(K, backend=backend)
    ok = den > 0
    skipped = np.flatnonzero(~ok)
    if not ok.any():
        raise StabilityError("every Gerschgörin denominator is non-positive; no stable step")
    bounds = np.full(len(m), np.inf)
    bounds[ok] = m[ok] / den[ok]
    row = int(np.argmin(bounds))
    if len(skipped):
        log.warning("stable_timestep: skipped %d row(s) with non-positive denominator", len(skipped))
    return StepBound(float(bounds[row]), row, skipped)


def stable_timestep(mass, K, backend=None):
    return gerschgorin_bound(mass, K, backend=backend).dt_s


@dataclass
class TimeIntegrator:
    """Forward Euler clock. ``t`` is kept as ``t0 + step_count * dt`` to avoid drift."""

    dt: float
    safety: float = 0.9
    t: float = 0.0
    step_count: int = 0
    t0: float = field(default=0.0, repr=False)

    def __post_init__(self):
        if not 0 < self.safety <= 1:
            raise ValueError(f"safety must lie in (0, 1], got {self.safety}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        self.t0 = self.t

    @classmethod
    def from_operators(cls, mass, K, safety=0.9, t=0.0, backend=None):
        return cls(dt=safety * stable_timestep(mass, K, backend=backend), safety=safety, t=t)

    def next_dt(self, t_final):
        """Step that does not overshoot ``t_final`` (shrunk only on the last step)."""
        rem = t_final - self.t
        if rem <= self.dt * (1.0 + 1e-9):
            return rem
        return self.dt

    def tick(self, dt_used, t_final=None):
        self.step_count += 1
        if dt_used == self.dt:
            self.t = self.t0 + self.step_count * self.dt
        else:
            self.t = t_final if t_final is not None else self.t + dt_used


def advance(u, mass, K, rhs, integrator, dirichlet=None, dt=None):
    """One Euler step ``u + dt M^-1 (rhs(t, u) - K u)`` followed by the Dirichlet overwrite.

    ``rhs(t, u)`` is sampled at the beginning-of-step time. ``dirichlet(u, t)``
    overwrites constrained entries at the end-of-step time.
    """
    m = _mass_diag(mass)
    dt = integrator.dt if dt is None else dt
    t = integrator.t
    f = rhs(t, u) if rhs is not None else 0.0
    u_new = u + dt * (f - K @ u) / m
    integrator.tick(dt)
    if dirichlet is not None:
        dirichlet(u_new, integrator.t)
    if not np.all(np.isfinite(u_new)):
        raise NumericalInstability(integrator.step_count, integrator.t)
    return u_new


@dataclass
class MarchResult:
    u: np.ndarray
    t: float
    steps: int
    dt: float
    snapshots: list


def march(u0, mass, K, t_final, rhs=None, dirichlet=None, integrator=None,
          snapshot_interval=None, progress=sys.stderr, backend=None, check_every=100):
    """Advance from ``integrator.t`` to ``t_final`` landing exactly on it.

    Parameters
    ----------
    rhs : callable ``(t, u) -> ndarray`` or None
    dirichlet : callable ``(u, t)`` that overwrites constrained entries in place
    snapshot_interval : float, optional
        Simulated time between stored copies of the state; each snapshot
        also writes a ``t=... max|u|=... dt=...`` line to ``progress``.
    check_every : int
        Steps between non-finite checks (always checked at the end).
    """
    m = _mass_diag(mass)
    K = sp.csr_matrix(K)
    if integrator is None:
        integrator = TimeIntegrator.from_operators(m, K, backend=backend)
    step = kernels.EulerStepper(K, m, backend=backend)
    u = np.array(u0, dtype=np.float64)
    if dirichlet is not None:
        dirichlet(u, integrator.t)
    out = np.empty_like(u)
    zero = np.zeros_like(u)
    snaps = []
    next_snap = None
    if snapshot_interval:
        next_snap = integrator.t + snapshot_interval
        snaps.append((integrator.t, u.copy()))

    while integrator.t < t_final - 1e-12 * max(1.0, abs(t_final)):
        dt = integrator.next_dt(t_final)
        f = rhs(integrator.t, u) if rhs is not None else zero
        step(u, np.ascontiguousarray(f, dtype=np.float64), dt, out)
        u, out = out, u
        integrator.tick(dt, t_final)
        if dirichlet is not None:
            dirichlet(u, integrator.t)
        if integrator.step_count % check_every == 0 and not np.all(np.isfinite(u)):
            raise NumericalInstability(integrator.step_count, integrator.t)
        if next_snap is not None and integrator.t >= next_snap - 1e-12:
            snaps.append((integrator.t, u.copy()))
            _progress(progress, integrator.t, u, dt)
            next_snap += snapshot_interval
    if not np.all(np.isfinite(u)):
        raise NumericalInstability(integrator.step_count, integrator.t)
    if next_snap is not None and snaps[-1][0] != integrator.t:
        snaps.append((integrator.t, u.copy()))
        _progress(progress, integrator.t, u, integrator.dt)
    return MarchResult(u, integrator.t, integrator.step_count, integrator.dt, snaps)


def _progress(stream, t, u, dt):
    if stream is not None:
        print(f"t={t:.6g} max|u|={np.abs(u).max():.6g} dt={dt:.6g}", file=stream)
