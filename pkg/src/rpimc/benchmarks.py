"""Analytic heat-conduction benchmarks, error metrics and refinement ladders."""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .assembly import PenaltyConfig, TransientProblem, apply_dirichlet, build_system
from .geometry import NEUMANN, generate_regular_grid, tag_boundaries, uniform_tags
from .timestep import TimeIntegrator, march

log = logging.getLogger(__name__)

PI = math.pi
CSV_COLUMNS = ["benchmark", "method", "h", "nodes", "dt", "E2", "NRMS",
               "rate_E2", "rate_NRMS", "wall_seconds"]
METHODS = ("rpimc", "mlpg_mc")


class MetricWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class BenchmarkCase:
    """One analytic problem ``u_t = div grad u + reaction(t) u + source(x, t)``.

    ``faces`` maps every box face to ``(kind, fn)`` where ``fn(x, t)`` is the
    prescribed value (Dirichlet) or outward normal derivative (Neumann).
    ``default_a_c`` is the support dilatation used when none is given.
    """

    id: str
    box: tuple
    analytic: Callable
    gradient: Callable
    source: Callable | None
    reaction: Callable | None
    faces: dict
    ladder: tuple
    full_ladder: tuple
    default_a_c: float
    laplacian: Callable
    time_derivative: Callable
    t_final: float = 1.0

    @property
    def dim(self):
        return len(self.box[0])

    def tags(self):
        return {f: kind for f, (kind, _) in self.faces.items()}

    def problem(self):
        return TransientProblem(
            c_rho=1.0,
            conductivity=1.0,
            initial=lambda x: self.analytic(x, 0.0),
            t_final=self.t_final,
            source=self.source,
            reaction=self.reaction,
            dirichlet=self.analytic,
            neumann=None,
        )

    def pde_residual(self, x, t):
        """``u_t - lap u - reaction u - f`` from the closed-form derivatives."""
        x = np.atleast_2d(x)
        r = self.time_derivative(x, t) - self.laplacian(x, t)
        if self.reaction is not None:
            r = r - self.reaction(t) * self.analytic(x, t)
        if self.source is not None:
            r = r - self.source(x, t)
        return r


# ------------------------------------------------------------------ heat2d

def _h2_u(x, t):
    return np.exp(-t) * np.sin(PI * x[:, 0]) * np.cos(PI * x[:, 1])


def _h2_grad(x, t):
    e = np.exp(-t)
    return np.column_stack([
        PI * e * np.cos(PI * x[:, 0]) * np.cos(PI * x[:, 1]),
        -PI * e * np.sin(PI * x[:, 0]) * np.sin(PI * x[:, 1]),
    ])


def _h2_source(x, t):
    # with the e^{-t} factor the closed form requires
    return (2 * PI**2 - t * t - 2) * np.exp(-t) * np.sin(PI * x[:, 0]) * np.cos(PI * x[:, 1])


def _h2_edge(sign):
    return lambda x, t: sign * np.exp(-t) * np.sin(PI * x[:, 0])


def _zero(x, t):
    return np.zeros(len(x))


HEAT2D = BenchmarkCase(
    id="heat2d_dirichlet",
    box=((0.0, 0.0), (1.0, 1.0)),
    analytic=_h2_u,
    gradient=_h2_grad,
    source=_h2_source,
    reaction=lambda t: 1.0 + t * t,
    faces={
        "x-": ("dirichlet", _zero),
        "x+": ("dirichlet", _zero),
        "y-": ("dirichlet", _h2_edge(1.0)),
        "y+": ("dirichlet", _h2_edge(-1.0)),  # cos(pi) = -1
    },
    ladder=(0.1, 0.05, 0.025, 0.0125),
    full_ladder=(0.1, 0.05, 0.025, 0.0125),
    default_a_c=1.5,
    laplacian=lambda x, t: -2 * PI**2 * _h2_u(x, t),
    time_derivative=lambda x, t: -_h2_u(x, t),
)


# ---------------------------------------------------------- heat3d insulated

def _ins_u(x, t):
    X, Y, Z = x.T
    return (1.0 + 2 * np.exp(-3 * t) * np.cos(X) * np.cos(Y) * np.cos(Z)
            + 3 * np.exp(-29 * t) * np.cos(2 * X) * np.cos(3 * Y) * np.cos(4 * Z))


def _ins_modes(x, t):
    X, Y, Z = x.T
    a = 2 * np.exp(-3 * t) * np.cos(X) * np.cos(Y) * np.cos(Z)
    b = 3 * np.exp(-29 * t) * np.cos(2 * X) * np.cos(3 * Y) * np.cos(4 * Z)
    return a, b


def _ins_grad(x, t):
    X, Y, Z = x.T
    a = 2 * np.exp(-3 * t)
    b = 3 * np.exp(-29 * t)
    c1, c2, c3 = np.cos(X), np.cos(Y), np.cos(Z)
    d1, d2, d3 = np.cos(2 * X), np.cos(3 * Y), np.cos(4 * Z)
    return np.column_stack([
        -a * np.sin(X) * c2 * c3 - 2 * b * np.sin(2 * X) * d2 * d3,
        -a * c1 * np.sin(Y) * c3 - 3 * b * d1 * np.sin(3 * Y) * d3,
        -a * c1 * c2 * np.sin(Z) - 4 * b * d1 * d2 * np.sin(4 * Z),
    ])


def _normal_derivative(axis, sign):
    return lambda x, t: sign * _ins_grad(x, t)[:, axis]


HEAT3D_INSULATED = BenchmarkCase(
    id="heat3d_insulated",
    box=((0.0, 0.0, 0.0), (PI, PI, PI)),
    analytic=_ins_u,
    gradient=_ins_grad,
    source=None,
    reaction=None,
    faces={f"{ax}{s}": ("neumann", _normal_derivative(k, 1.0 if s == "+" else -1.0))
           for k, ax in enumerate("xyz") for s in "-+"},
    ladder=(PI / 10, PI / 20, PI / 30),
    full_ladder=(PI / 10, PI / 20, PI / 30, PI / 40),
    default_a_c=2.1,
    laplacian=lambda x, t: -3 * _ins_modes(x, t)[0] - 29 * _ins_modes(x, t)[1],
    time_derivative=lambda x, t: -3 * _ins_modes(x, t)[0] - 29 * _ins_modes(x, t)[1],
)


# ------------------------------------------------------ heat3d inhomogeneous

def _inh_u(x, t):
    X, Y, Z = x.T
    return np.sin(Z) + np.exp(-2 * t) * np.sin(X + Y)


def _inh_grad(x, t):
    X, Y, Z = x.T
    c = np.exp(-2 * t) * np.cos(X + Y)
    return np.column_stack([c, c, np.cos(Z)])


def _inh_face(axis):
    def value(x, t):
        X, Y, Z = x.T
        e = np.exp(-2 * t)
        if axis == "x-":
            return np.sin(Z) + e * np.sin(Y)
        if axis == "x+":
            return np.sin(Z) - e * np.sin(Y)
        if axis == "y-":
            return np.sin(Z) + e * np.sin(X)
        if axis == "y+":
            return np.sin(Z) - e * np.sin(X)
        return e * np.sin(X + Y)
    return value


HEAT3D_INHOMOGENEOUS = BenchmarkCase(
    id="heat3d_inhomogeneous",
    box=((0.0, 0.0, 0.0), (PI, PI, PI)),
    analytic=_inh_u,
    gradient=_inh_grad,
    source=lambda x, t: np.sin(x[:, 2]),
    reaction=None,
    faces={f: ("dirichlet", _inh_face(f)) for f in ("x-", "x+", "y-", "y+", "z-", "z+")},
    ladder=(PI / 10, PI / 20, PI / 30),
    full_ladder=(PI / 10, PI / 20, PI / 30, PI / 40),
    default_a_c=1.5,
    laplacian=lambda x, t: -np.sin(x[:, 2]) - 2 * np.exp(-2 * t) * np.sin(x[:, 0] + x[:, 1]),
    time_derivative=lambda x, t: -2 * np.exp(-2 * t) * np.sin(x[:, 0] + x[:, 1]),
)

CASES = {c.id: c for c in (HEAT2D, HEAT3D_INSULATED, HEAT3D_INHOMOGENEOUS)}


def get_case(case_id):
    try:
        return CASES[case_id]
    except KeyError:
        raise KeyError(f"unknown benchmark {case_id!r}; choose from {sorted(CASES)}") from None


def _as_case(case):
    return case if isinstance(case, BenchmarkCase) else get_case(case)


def analytic_solution(case, x, t):
    case = _as_case(case)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    val = case.analytic(np.atleast_2d(x), float(t))
    return float(val[0]) if single else val


def fd_pde_residual(case, x, t, step=1e-3):
    """PDE residual from Richardson-extrapolated central differences of ``analytic``.

    Independent of the closed-form derivatives carried by the case.
    """
    case = _as_case(case)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))

    def derivs(s):
        u0 = case.analytic(x, t)
        ut = (case.analytic(x, t + s) - case.analytic(x, t - s)) / (2 * s)
        lap = np.zeros(len(x))
        for k in range(case.dim):
            e = np.zeros(case.dim)
            e[k] = s
            lap += (case.analytic(x + e, t) - 2 * u0 + case.analytic(x - e, t)) / (s * s)
        return ut, lap

    ut1, lap1 = derivs(step)
    ut2, lap2 = derivs(step / 2)
    ut = (4 * ut2 - ut1) / 3
    lap = (4 * lap2 - lap1) / 3
    r = ut - lap
    if case.reaction is not None:
        r = r - case.reaction(t) * case.analytic(x, t)
    if case.source is not None:
        r = r - case.source(x, t)
    return r


def validate_case(case, samples=20, seed=0, tol=1e-6):
    """Check the PDE at random interior space-time samples; raises on failure."""
    case = _as_case(case)
    rng = np.random.default_rng(seed)
    lo, hi = (np.asarray(b) for b in case.box)
    x = lo + (hi - lo) * (0.05 + 0.9 * rng.random((samples, case.dim)))
    t = 0.05 + 0.9 * rng.random(samples) * case.t_final
    worst = max(abs(fd_pde_residual(case, x[i], t[i])[0]) for i in range(samples))
    if worst >= tol:
        raise ValueError(f"{case.id}: analytic solution misses the PDE (residual {worst:.2e})")
    return worst


def boundary_residual(case, n_times=10, per_face=25, seed=0):
    """Largest mismatch between the closed form and each face condition."""
    case = _as_case(case)
    rng = np.random.default_rng(seed)
    lo, hi = (np.asarray(b, dtype=np.float64) for b in case.box)
    worst = 0.0
    for t in rng.random(n_times) * case.t_final:
        for k in range(case.dim):
            for side, val in (("-", lo[k]), ("+", hi[k])):
                x = lo + (hi - lo) * rng.random((per_face, case.dim))
                x[:, k] = val
                kind, fn = case.faces["xyz"[k] + side]
                if kind == "dirichlet":
                    got = case.analytic(x, t)
                else:
                    got = (1.0 if side == "+" else -1.0) * case.gradient(x, t)[:, k]
                worst = max(worst, float(np.abs(got - fn(x, t)).max()))
    return worst


# ------------------------------------------------------------------ metrics

@dataclass(frozen=True)
class ErrorPair:
    e2: float | None
    nrms: float | None
    identity_residual: float | None = None


def error_metrics(u_h, u_an):
    """E2 and NRMS over nodal values; a metric with a zero denominator is ``None``."""
    u_h = np.asarray(u_h, dtype=np.float64)
    u_an = np.asarray(u_an, dtype=np.float64)
    num = math.sqrt(float(((u_h - u_an) ** 2).sum()))
    den_e2 = math.sqrt(float((u_an**2).sum()))
    mag = np.abs(u_an)
    rng = float(mag.max() - mag.min())
    e2 = num / den_e2 if den_e2 > 0 else None
    nrms = num / rng if rng > 0 else None
    if e2 is None:
        warnings.warn("E2 undefined: analytic solution is identically zero", MetricWarning, stacklevel=2)
    if nrms is None:
        warnings.warn("NRMS undefined: analytic magnitude is constant", MetricWarning, stacklevel=2)
    ident = None
    if e2 is not None and nrms is not None:
        lhs = e2 * den_e2
        rhs = nrms * rng
        ident = abs(lhs - rhs) / max(abs(lhs), abs(rhs), np.finfo(float).tiny)
    return ErrorPair(e2, nrms, ident)


def compute_errors(u_h, case, t, points):
    return error_metrics(u_h, analytic_solution(case, points, t))


def convergence_rate(e_a, e_b, h_a, h_b):
    if min(e_a, e_b, h_a, h_b) <= 0:
        raise ValueError("errors and spacings must be positive")
    if h_a == h_b:
        raise ValueError("spacings must differ")
    return math.log(e_a / e_b) / math.log(h_a / h_b)


# ------------------------------------------------------------------ drivers

@dataclass
class CaseResult:
    case: str
    method: str
    h: float
    nodes: int
    dt: float
    steps: int
    errors: ErrorPair
    wall_seconds: float
    u: np.ndarray = field(repr=False)
    cloud: object = field(repr=False)
    timings: dict = field(default_factory=dict)

    @property
    def e2(self):
        return self.errors.e2

    @property
    def nrms(self):
        return self.errors.nrms


def build_cloud(case, h):
    case = _as_case(case)
    grid = generate_regular_grid(case.box, h)
    return tag_boundaries(grid, case.tags())


def run_case(case, method="rpimc", h=None, a_c=None, alpha_c=1.5, q_exp=1.03,
             penalty=None, safety=0.9, backend=None, progress=None, snapshot_interval=None):
    """Grid, supports, basis, operators and the time march for one spacing.

    ``method`` is ``'rpimc'`` or ``'mlpg_mc'``. For MLPG-MC the Dirichlet
    overwrite acts on nodal parameters and errors are measured on them.
    """
    case = _as_case(case)
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    h = case.ladder[0] if h is None else h
    a_c = case.default_a_c if a_c is None else a_c
    t0 = time.perf_counter()
    cloud = build_cloud(case, h)
    system = build_system(
        cloud, conductivity=1.0, c_rho=1.0, method="rpi" if method == "rpimc" else "mls",
        a_c=a_c, alpha_c=alpha_c, q_exp=q_exp, penalty=penalty or PenaltyConfig(), backend=backend,
    )
    pts = cloud.positions
    rhs = _rhs_provider(case, cloud, system)
    u0 = case.analytic(pts, 0.0)
    integ = TimeIntegrator.from_operators(system.mass, system.stiffness, safety=safety, backend=backend)

    def dirichlet(u, t):
        apply_dirichlet(u, cloud, case.analytic, t)

    t1 = time.perf_counter()
    res = march(u0, system.mass, system.stiffness, case.t_final, rhs=rhs, dirichlet=dirichlet,
                integrator=integ, snapshot_interval=snapshot_interval, progress=progress, backend=backend)
    t2 = time.perf_counter()
    errs = compute_errors(res.u, case, res.t, pts)
    timings = dict(system.timings, march=t2 - t1)
    log.info("%s %s h=%.4g N=%d dt=%.3g E2=%s", case.id, method, h, len(cloud), integ.dt, errs.e2)
    return CaseResult(case.id, method, float(h), len(cloud), integ.dt, res.steps, errs,
                      t2 - t0, res.u, cloud, timings)


def _rhs_provider(case, cloud, system):
    pts = cloud.positions
    neu = cloud.indices(NEUMANN)
    flux_fns = None
    if len(neu) and system.neumann_load is not None:
        flux_fns = _neumann_flux_data(case, cloud, neu)
    if case.source is None and case.reaction is None and flux_fns is None:
        return None

    def rhs(t, u):
        f = np.zeros(len(pts))
        if case.source is not None:
            f += case.source(pts, t)
        if case.reaction is not None:
            f += case.reaction(t) * u
        if flux_fns is not None:
            qbar = flux_fns(t)
            if np.any(qbar):
                f += system.neumann_load @ qbar
        return f

    return rhs


def _neumann_flux_data(case, cloud, neu):
    """Prescribed outward flux ``-du/dn`` per Neumann node (unit conductivity).

    At a node shared by several Neumann faces the flux along the averaged
    normal is used.
    """
    pts = cloud.positions[neu]
    nrm = cloud.normals[neu]

    def qbar(t):
        return -(case.gradient(pts, t) * nrm).sum(axis=1)

    # skip the work entirely for homogeneous data
    if all(not np.any(fn(pts, t)) for kind, fn in case.faces.values() if kind == "neumann"
           for t in (0.0, 0.5)):
        return None
    return qbar


@dataclass
class ConvergenceReport:
    case: str
    method: str
    spacings: list
    e2: list
    nrms: list
    rates_e2: list
    rates_nrms: list
    results: list = field(default_factory=list, repr=False)

    def rows(self):
        out = []
        for i, r in enumerate(self.results):
            out.append({
                "benchmark": self.case,
                "method": self.method,
                "h": r.h,
                "nodes": r.nodes,
                "dt": r.dt,
                "E2": r.e2,
                "NRMS": r.nrms,
                "rate_E2": self.rates_e2[i - 1] if i else None,
                "rate_NRMS": self.rates_nrms[i - 1] if i else None,
                "wall_seconds": r.wall_seconds,
            })
        return out


def _rates(errs, hs):
    out = []
    for i in range(1, len(hs)):
        if errs[i - 1] is None or errs[i] is None:
            out.append(None)
        else:
            out.append(convergence_rate(errs[i - 1], errs[i], hs[i - 1], hs[i]))
    return out


def run_ladder(case, method="rpimc", spacings=None, full=False, **kwargs):
    case = _as_case(case)
    if spacings is None:
        spacings = case.full_ladder if full else case.ladder
    spacings = [float(h) for h in spacings]
    if any(b >= a for a, b in zip(spacings, spacings[1:])):
        raise ValueError("spacings must be strictly decreasing")
    results = [run_case(case, method, h, **kwargs) for h in spacings]
    e2 = [r.e2 for r in results]
    nrms = [r.nrms for r in results]
    return ConvergenceReport(case.id, method, spacings, e2, nrms,
                             _rates(e2, spacings), _rates(nrms, spacings), results)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for rep in reports:
            for row in rep.rows():
                w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
