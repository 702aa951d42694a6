"""Operator-split monodomain model on a tissue slab.

Units: cm, ms, mV. The diffusion operator is the mixed-collocation ``K'``
built with the anisotropic tensor ``D = d0 [(1 - rho) f f^T + rho I]`` and
zero-flux penalty boundaries. The reaction term comes from a pluggable ionic
model; the default is the two-variable Aliev-Panfilov model rescaled to a
-80 mV resting potential and a 250 ms action potential.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .assembly import PenaltyConfig, build_system
from .geometry import generate_regular_grid, tag_boundaries, uniform_tags
from .timestep import NumericalInstability, stable_timestep

log = logging.getLogger(__name__)

REACTION_DT_MAX = 0.02  # ms
UNACTIVATED = -1.0


class GateBoundsError(RuntimeError):
    pass


# ------------------------------------------------------------------ tissue

@dataclass(frozen=True, eq=False)
class FiberField:
    """Fiber directions (one per node, or a single shared vector) and conductivities."""

    direction: np.ndarray
    d0: float = 0.001
    rho_aniso: float = 0.25

    def __post_init__(self):
        f = np.atleast_2d(np.asarray(self.direction, dtype=np.float64))
        if f.shape[1] not in (2, 3):
            raise ValueError(f"fiber vectors must have 2 or 3 components, got {f.shape}")
        norms = np.linalg.norm(f, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise ValueError(f"fiber vector at node {int(np.argmax(np.abs(norms - 1.0)))} is not unit length")
        if not self.d0 > 0:
            raise ValueError("d0 must be positive")
        if not 0 < self.rho_aniso <= 1:
            raise ValueError("rho_aniso must lie in (0, 1]")
        f.setflags(write=False)
        object.__setattr__(self, "direction", f)

    @property
    def uniform(self):
        return len(self.direction) == 1

    def tensors(self):
        """``(N, d, d)`` per-node tensors, or a single ``(d, d)`` one for a uniform field."""
        f = self.direction
        eye = np.eye(f.shape[1])
        D = self.d0 * ((1.0 - self.rho_aniso) * np.einsum("ka,kb->kab", f, f) + self.rho_aniso * eye)
        return D[0] if self.uniform else D


def diffusion_tensor(fiber, node=0):
    f = fiber.direction[0 if fiber.uniform else node]
    d = len(f)
    return fiber.d0 * ((1.0 - fiber.rho_aniso) * np.outer(f, f) + fiber.rho_aniso * np.eye(d))


# ------------------------------------------------------------- ionic model

@dataclass(frozen=True)
class AlievPanfilov:
    """Two-variable phenomenological model; ``V = v_rest + v_amp * u``.

    ``tau`` (ms per model time unit) sets the overall time scale. The
    defaults give an upstroke about 4.8 ms after a 1 ms pulse at twice
    threshold and an APD90 of about 247 ms: the steep excitation ``k``
    shortens the upstroke and the small ``mu1`` restores the plateau.
    """

    v_rest: float = -80.0
    v_amp: float = 100.0
    tau: float = 9.6
    k: float = 15.0
    a: float = 0.15
    eps0: float = 0.002
    mu1: float = 0.105
    mu2: float = 0.3
    capacitance: float = 1.0

    n_gates = 1
    gate_names = ("w",)

    def resting_state(self, n):
        return IonicState(np.full(n, self.v_rest), np.zeros((1, n)), self.capacitance)

    def bounds(self):
        """Admissible ranges for ``v`` and each gate."""
        return {
            "v": (self.v_rest - 0.25 * self.v_amp, self.v_rest + 1.5 * self.v_amp),
            "w": (-0.5, 10.0),
        }

    def advance(self, state, stim, nsub, dt_sub):
        # stimulus enters as a current density per unit capacitance
        kernels.aliev_panfilov(state.v, state.gates[0], stim / self.capacitance, nsub, dt_sub, self)


@dataclass
class IonicState:
    v: np.ndarray
    gates: np.ndarray
    capacitance: float = 1.0

    def copy(self):
        return IonicState(self.v.copy(), self.gates.copy(), self.capacitance)


def check_bounds(state, model):
    bounds = model.bounds()
    arrays = {"v": state.v}
    arrays.update({name: state.gates[i] for i, name in enumerate(model.gate_names)})
    for name, arr in arrays.items():
        lo, hi = bounds[name]
        bad = np.flatnonzero(~((arr >= lo) & (arr <= hi)))
        if len(bad):
            i = int(bad[0])
            raise GateBoundsError(f"{name} out of bounds at node {i}: {arr[i]:.6g} not in [{lo}, {hi}]")


def reaction_substeps(dt, dt_max=REACTION_DT_MAX):
    nsub = max(1, math.ceil(dt / dt_max - 1e-12))
    return nsub, dt / nsub


def reaction_step(state, model, dt, stim=None, dt_max=REACTION_DT_MAX, check=True):
    """Advance ``v`` and gates over ``dt`` with explicit substeps of at most ``dt_max``."""
    n = len(state.v)
    stim = np.zeros(n) if stim is None else np.broadcast_to(np.asarray(stim, dtype=np.float64), (n,))
    nsub, dt_sub = reaction_substeps(dt, dt_max)
    model.advance(state, np.ascontiguousarray(stim), nsub, dt_sub)
    if check:
        check_bounds(state, model)
    return state


@dataclass(frozen=True, eq=False)
class Stimulus:
    """Square current pulse (mV/ms) on a node mask."""

    mask: np.ndarray
    amplitude: float
    start: float = 0.0
    duration: float = 1.0

    def current(self, t0, t1):
        """Pulse averaged over ``[t0, t1]`` so that partial overlap keeps the delivered charge."""
        overlap = min(t1, self.start + self.duration) - max(t0, self.start)
        if overlap <= 0:
            return None
        return np.where(self.mask, self.amplitude * overlap / (t1 - t0), 0.0)


class DiffusionOperator:
    """Fused forward Euler step for ``dV/dt = -M^-1 K' V``."""

    def __init__(self, system, backend=None):
        self.system = system
        self.dt_s = stable_timestep(system.mass, system.stiffness, backend=backend)
        self._step = kernels.EulerStepper(system.stiffness, system.mass, backend=backend)
        n = len(system.mass)
        self._zero = np.zeros(n)
        self._buf = np.empty(n)

    def __call__(self, v, dt):
        self._step(v, self._zero, dt, self._buf)
        v[:] = self._buf
        return v


def split_step(state, model, diffusion, dt, t=0.0, stimulus=None, check=True):
    """One Godunov step: reaction over ``dt`` then one diffusion Euler step of ``dt``."""
    stim = stimulus.current(t, t + dt) if stimulus is not None else None
    reaction_step(state, model, dt, stim, check=check)
    if diffusion is not None:
        diffusion(state.v, dt)
    return state


# --------------------------------------------------------------- threshold

def _fires(model, amplitude, duration, dt, window):
    state = model.resting_state(1)
    stim = Stimulus(np.ones(1, dtype=bool), amplitude, 0.0, duration)
    t = 0.0
    while t < window:
        split_step(state, model, None, dt, t, stim, check=False)
        t += dt
        if state.v[0] > 0.0:
            return True
    return False


def diastolic_threshold(model, duration=1.0, iterations=12, dt=REACTION_DT_MAX, window=50.0):
    """Smallest pulse amplitude (mV/ms) of the given duration that triggers an upstroke."""
    lo, hi = 0.0, 1.0
    while not _fires(model, hi, duration, dt, window):
        lo, hi = hi, 2.0 * hi
        if hi > 1e6:
            raise RuntimeError("no amplitude below 1e6 excites the cell")
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if _fires(model, mid, duration, dt, window):
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------- LAT

@dataclass
class ActivationMap:
    lat: np.ndarray
    threshold: float = 0.0

    @property
    def activated(self):
        return self.lat != UNACTIVATED


def compute_lat(history, times, threshold=0.0):
    """First upward threshold crossing per node, linearly interpolated between snapshots.

    ``history`` has shape ``(T, N)``. Nodes that never cross get ``UNACTIVATED``.
    """
    history = np.asarray(history, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    lat = np.full(history.shape[1], UNACTIVATED)
    done = np.zeros(history.shape[1], dtype=bool)
    for k in range(1, len(times)):
        _record_crossings(lat, done, history[k - 1], history[k], times[k - 1], times[k], threshold)
    return ActivationMap(lat, threshold)


def _record_crossings(lat, done, v0, v1, t0, t1, threshold):
    hit = np.flatnonzero(~done & (v0 < threshold) & (v1 >= threshold))
    if len(hit):
        frac = (threshold - v0[hit]) / (v1[hit] - v0[hit])
        lat[hit] = t0 + frac * (t1 - t0)
        done[hit] = True
    return len(hit)


class LatTracker:
    """Online version of :func:`compute_lat` fed one state at a time."""

    def __init__(self, v0, t0=0.0, threshold=0.0):
        self.threshold = threshold
        self.lat = np.full(len(v0), UNACTIVATED)
        self.done = np.asarray(v0) >= threshold
        self._prev = np.array(v0, dtype=np.float64)
        self._t = t0
        self.count = 0

    def update(self, v, t):
        self.count += _record_crossings(self.lat, self.done, self._prev, v, self._t, t, self.threshold)
        self._prev[:] = v
        self._t = t

    @property
    def all_activated(self):
        return bool(self.done.all())

    def result(self):
        return ActivationMap(self.lat.copy(), self.threshold)


# -------------------------------------------------------------------- slab

@dataclass
class SlabConfig:
    edge: tuple = (1.0, 1.0, 1.0)
    h: float = 0.05
    d0: float = 0.001
    rho_aniso: float = 0.25
    fiber: tuple = (0.0, 0.0, 1.0)
    method: str = "rpimc"
    a_c: float = 2.1
    alpha_c: float = 1.5
    q_exp: float = 1.03
    penalty: float = 1e6
    safety: float = 0.9
    dt_max: float = 0.05
    stim_face: str = "z-"
    stim_depth: float = 0.1
    stim_duration: float = 1.0
    stim_factor: float = 2.0
    t_max: float = 400.0
    stop_when_activated: bool = True
    snapshot_interval: float = 0.0


@dataclass
class SlabResult:
    cloud: object
    activation: ActivationMap
    dt: float
    steps: int
    t_end: float
    threshold: float
    state: IonicState = field(repr=False)
    timings: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list, repr=False)


def build_slab(config):
    box = ((0.0, 0.0, 0.0), tuple(float(e) for e in config.edge))
    grid = generate_regular_grid(box, config.h)
    return tag_boundaries(grid, uniform_tags("neumann", 3))


def build_diffusion(cloud, config, backend=None):
    f = np.asarray(config.fiber, dtype=np.float64)
    fiber = FiberField(f / np.linalg.norm(f), config.d0, config.rho_aniso)
    system = build_system(
        cloud, conductivity=fiber.tensors(), c_rho=1.0,
        method="rpi" if config.method == "rpimc" else "mls",
        a_c=config.a_c, alpha_c=config.alpha_c, q_exp=config.q_exp,
        penalty=PenaltyConfig(config.penalty), backend=backend,
    )
    return DiffusionOperator(system, backend=backend)


def stimulus_region(cloud, face, depth):
    """Nodes within ``depth`` of a box face (the face layer itself at least)."""
    axis = "xyz".index(face[0])
    x = cloud.positions[:, axis]
    dist = x.max() - x if face[1] == "+" else x - x.min()
    return dist <= depth + 1e-9 * cloud.spacing


def run_slab(config=None, model=None, backend=None, progress=None):
    """Planar stimulus on one face of a zero-flux slab; returns the activation map."""
    config = config or SlabConfig()
    model = model or AlievPanfilov()
    t_start = time.perf_counter()
    cloud = build_slab(config)
    diffusion = build_diffusion(cloud, config, backend=backend)
    timings = dict(diffusion.system.timings)

    mask = stimulus_region(cloud, config.stim_face, config.stim_depth)
    thr = diastolic_threshold(model, duration=config.stim_duration)
    stim = Stimulus(mask, config.stim_factor * thr, 0.0, config.stim_duration)

    dt = min(config.safety * diffusion.dt_s, config.dt_max)
    state = model.resting_state(len(cloud))
    tracker = LatTracker(state.v, 0.0)
    snaps = []
    next_snap = config.snapshot_interval if config.snapshot_interval > 0 else None
    t0 = time.perf_counter()
    t = 0.0
    step = 0
    while t < config.t_max - 1e-12:
        dt_k = min(dt, config.t_max - t)
        split_step(state, model, diffusion, dt_k, t, stim)
        step += 1
        t = step * dt if dt_k == dt else config.t_max
        if not np.all(np.isfinite(state.v)):
            raise NumericalInstability(step, t)
        tracker.update(state.v, t)
        if next_snap is not None and t >= next_snap - 1e-12:
            snaps.append((t, state.v.copy()))
            next_snap += config.snapshot_interval
            if progress is not None:
                print(f"t={t:.6g} max|u|={np.abs(state.v).max():.6g} dt={dt:.6g}", file=progress)
        if config.stop_when_activated and tracker.all_activated and t > config.stim_duration:
            break
    timings["march"] = time.perf_counter() - t0
    timings["total"] = time.perf_counter() - t_start
    log.info("slab: N=%d dt=%.4g steps=%d activated %d/%d", len(cloud), dt, step,
             int(tracker.done.sum()), len(cloud))
    return SlabResult(cloud, tracker.result(), dt, step, t, thr, state, timings, snaps)


def conduction_velocity(cloud, activation, axis, trim=0.2):
    """Wavefront speed (cm/ms) along ``axis`` from a least-squares fit of plane-mean LAT.

    Planes within ``trim`` of either end of the axis are left out to avoid the
    stimulus and the far boundary.
    """
    x = cloud.positions[:, axis]
    lo, hi = x.min(), x.max()
    keep = activation.activated & (x >= lo + trim * (hi - lo)) & (x <= hi - trim * (hi - lo))
    planes, inv = np.unique(np.round(x[keep] / cloud.spacing).astype(np.int64), return_inverse=True)
    if len(planes) < 2:
        raise ValueError("not enough activated planes to fit a velocity")
    mean_lat = np.bincount(inv, weights=activation.lat[keep]) / np.bincount(inv)
    slope = np.polyfit(planes * cloud.spacing, mean_lat, 1)[0]
    return 1.0 / slope


def lat_relative_difference(lat, reference, cloud):
    """Mean relative LAT difference split into interior and boundary nodes."""
    ok = (lat != UNACTIVATED) & (reference != UNACTIVATED) & (reference > 0)
    rel = np.abs(lat - reference) / np.where(ok, reference, 1.0)
    bnd = cloud.on_boundary
    out = {}
    for name, sel in (("interior", ok & ~bnd), ("boundary", ok & bnd)):
        out[name] = float(rel[sel].mean()) if sel.any() else float("nan")
    return out


# -------------------------------------------------------------------- output

def write_lat_csv(cloud, activation, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "x", "y", "z", "lat_ms"])
        pos = cloud.positions
        for i in range(len(cloud)):
            z = repr(float(pos[i, 2])) if cloud.dim == 3 else "0.0"
            w.writerow([i, repr(float(pos[i, 0])), repr(float(pos[i, 1])), z, repr(float(activation.lat[i]))])


def write_vtk_points(cloud, path, fields, title="rpimc"):
    """Legacy ASCII VTK polydata with one scalar array per entry of ``fields``."""
    pos = cloud.positions
    if cloud.dim == 2:
        pos = np.column_stack([pos, np.zeros(len(pos))])
    n = len(pos)
    with open(path, "w") as fh:
        fh.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET POLYDATA\n")
        fh.write(f"POINTS {n} double\n")
        for p in pos:
            fh.write(f"{p[0]!r} {p[1]!r} {p[2]!r}\n")
        fh.write(f"VERTICES {n} {2 * n}\n")
        for i in range(n):
            fh.write(f"1 {i}\n")
        fh.write(f"POINT_DATA {n}\n")
        for name, values in fields.items():
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for v in np.asarray(values, dtype=np.float64):
                fh.write(f"{v!r}\n")


def write_lat_vtk(cloud, activation, path):
    write_vtk_points(cloud, path, {"lat_ms": activation.lat}, title="local activation time")
