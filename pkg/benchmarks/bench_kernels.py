"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--h 0.05] [--repeat 3]

Prints one line per kernel with the best-of-N wall time for each backend,
the speedup and the largest output difference.
"""

import argparse
import time

import numpy as np

from rpimc import kernels
from rpimc.assembly import build_system
from rpimc.basis import mls_params_for, rpi_params_for
from rpimc.geometry import find_supports, generate_regular_grid, tag_boundaries, uniform_tags
from rpimc.monodomain import AlievPanfilov


def best_of(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _maxdiff(a, b):
    if isinstance(a, tuple):
        return max(_maxdiff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.abs(a - b).max()) if a.size else 0.0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--h", type=float, default=0.05, help="2D lattice spacing on the unit square")
    ap.add_argument("--h3", type=float, default=np.pi / 12, help="3D lattice spacing on [0, pi]^3")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    try:
        kernels.get_backend("compiled")
    except ImportError:
        print("compiled kernels are not built; nothing to compare")
        return

    cloud2 = generate_regular_grid(((0, 0), (1, 1)), args.h)
    cloud3 = tag_boundaries(generate_regular_grid(((0, 0, 0), (np.pi,) * 3), args.h3), uniform_tags("neumann", 3))
    sup3 = find_supports(cloud3, 1.5)
    rp = rpi_params_for(cloud3)
    mp = mls_params_for(cloud3, 1.5)
    n3 = len(cloud3)
    eptr = np.arange(n3 + 1)
    system = build_system(cloud3, a_c=1.5)
    u = np.random.default_rng(0).random(n3)
    zero = np.zeros(n3)
    model = AlievPanfilov()

    def ap_run(backend):
        v = np.full(n3, -80.0) + 30 * u
        w = np.zeros(n3)
        kernels.aliev_panfilov(v, w, zero, 50, 0.02, model, backend=backend)
        return v, w

    def euler(backend):
        step = kernels.EulerStepper(system.stiffness, system.mass, backend=backend)
        out = np.empty(n3)
        for _ in range(20):
            step(u, zero, 1e-4, out)
        return out

    cases = {
        f"box_neighbors 2D N={len(cloud2)}": lambda b: kernels.box_neighbors(cloud2.positions, 1.5 * args.h, 1.5 * args.h, backend=b),
        f"rpi_shapes 3D N={n3}": lambda b: kernels.rpi_shapes(
            cloud3.positions, sup3.indptr, sup3.indices, eptr, cloud3.positions, rp.r_c, rp.q_exp, backend=b)[:2],
        f"mls_shapes 3D N={n3}": lambda b: kernels.mls_shapes(
            cloud3.positions, sup3.indptr, sup3.indices, eptr, cloud3.positions, mp.support_radius, backend=b)[:2],
        "gerschgorin K'": lambda b: kernels.gerschgorin_denominators(system.stiffness, backend=b),
        "euler x20": euler,
        "aliev_panfilov x50": ap_run,
    }
    print(f"{'kernel':28s} {'compiled s':>11s} {'python s':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, fn in cases.items():
        tc, oc = best_of(lambda: fn("compiled"), args.repeat)
        tp, op = best_of(lambda: fn("python"), args.repeat)
        print(f"{name:28s} {tc:11.4f} {tp:10.4f} {tp / tc:8.1f} {_maxdiff(oc, op):10.2e}")


if __name__ == "__main__":
    main()
