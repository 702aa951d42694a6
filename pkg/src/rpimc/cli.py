"""Command-line front end: ``rpimc {benchmark,ladder,monodomain,shape-debug}``.

Settings resolve as defaults, then a flat ``key = value`` config file
(``--config``), then command-line flags. The resolved configuration is
written to the output directory as ``config.txt``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

log = logging.getLogger("rpimc")

COMMANDS = ("benchmark", "ladder", "monodomain", "shape-debug")
PHASES = ("basis", "assembly", "march", "output")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = ""
    case: str = "heat2d_dirichlet"
    method: str = "rpimc"
    h: float | None = None
    ladder: tuple | None = None
    full: bool = False
    a_c: float | None = None
    alpha_c: float = 1.5
    q_exp: float = 1.03
    alpha: float = 1e6
    safety: float = 0.9
    snapshot_interval: float = 0.0
    out_dir: str = "rpimc_out"
    csv: str = "report.csv"
    threads: int = 1
    seed: int = 42
    backend: str = "auto"
    node: int = 0
    dump_operator: str = ""
    # monodomain
    edge: tuple = (1.0, 1.0, 1.0)
    d0: float = 0.001
    rho_aniso: float = 0.25
    fiber: tuple = (0.0, 0.0, 1.0)
    stim_face: str = "z-"
    t_max: float = 400.0
    dt_max: float = 0.05
    lat_csv: str = "lat.csv"
    lat_vtk: str = "lat.vtk"


_FLOAT_TUPLE = {"ladder", "edge", "fiber"}
_OPTIONAL_FLOAT = {"h", "a_c"}


def _convert(name, raw):
    """Parse a config-file or flag string into the field's type."""
    ftype = {f.name: f.type for f in fields(RunConfig)}[name]
    raw = raw.strip()
    try:
        if name in _FLOAT_TUPLE:
            if raw in ("", "none", "None"):
                return None
            vals = tuple(float(_eval_pi(v)) for v in raw.replace(" ", "").split(",") if v)
            return vals
        if name in _OPTIONAL_FLOAT:
            return None if raw in ("", "none", "None") else float(_eval_pi(raw))
        if "bool" in str(ftype):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in str(ftype):
            return int(raw)
        if "float" in str(ftype):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot interpret {raw!r} as {ftype}") from None


def _eval_pi(tok):
    """Accept ``pi/20`` style spacings."""
    tok = tok.strip()
    if "pi" in tok:
        num, _, den = tok.replace("pi", "1").partition("/")
        return math.pi * float(num or 1) / float(den or 1)
    return tok


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path):
    out = {}
    names = {f.name for f in fields(RunConfig)}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        if key not in names:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, val)
    return out


def write_config_file(config, path):
    with open(path, "w") as fh:
        for f in fields(RunConfig):
            fh.write(f"{f.name} = {_format(getattr(config, f.name))}\n")


def build_parser():
    p = argparse.ArgumentParser(prog="rpimc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="command")
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    S = argparse.SUPPRESS
    g.add_argument("--config", default=S, help="flat key = value file")
    g.add_argument("--method", choices=("rpimc", "mlpg_mc"), default=S)
    g.add_argument("--h", default=S, help="nodal spacing (accepts pi/20)")
    g.add_argument("--ladder", default=S, help="comma-separated spacings")
    g.add_argument("--a-c", dest="a_c", default=S, help="support dilatation coefficient")
    g.add_argument("--alpha-c", dest="alpha_c", default=S)
    g.add_argument("--q-exp", dest="q_exp", default=S)
    g.add_argument("--alpha", default=S, help="Neumann penalty factor")
    g.add_argument("--safety", default=S)
    g.add_argument("--snapshot-interval", dest="snapshot_interval", default=S)
    g.add_argument("--out-dir", dest="out_dir", default=S)
    g.add_argument("--threads", default=S)
    g.add_argument("--seed", default=S)
    g.add_argument("--backend", choices=("auto", "compiled", "python"), default=S)
    g.add_argument("-v", "--verbose", action="store_true", default=False)

    bench = argparse.ArgumentParser(add_help=False)
    bench.add_argument("--case", default=S)
    bench.add_argument("--csv", default=S, help="report file name inside --out-dir")
    bench.add_argument("--full", action="store_const", const="true", default=S)

    sub.add_parser("benchmark", parents=[common, bench], help="one benchmark run")
    sub.add_parser("ladder", parents=[common, bench], help="refinement ladder with rates")
    mono = sub.add_parser("monodomain", parents=[common], help="slab activation map")
    for flag in ("edge", "d0", "rho-aniso", "fiber", "stim-face", "t-max", "dt-max", "lat-csv", "lat-vtk"):
        mono.add_argument(f"--{flag}", dest=flag.replace("-", "_"), default=S)
    dbg = sub.add_parser("shape-debug", parents=[common, bench], help="inspect shape functions at a node")
    dbg.add_argument("--node", default=S)
    dbg.add_argument("--dump-operator", dest="dump_operator", default=S,
                     help="write K' as 'rows cols nnz' + 'row col value' lines")
    return p


def parse_config(argv=None):
    """Resolve a :class:`RunConfig` from ``argv`` (defaults < file < flags)."""
    parser = build_parser()
    ns = parser.parse_args(argv)
    if not ns.command:
        parser.error("a command is required: " + ", ".join(COMMANDS))
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "verbose")}
    if "h" in given and "ladder" in given:
        raise ConfigError("--h and --ladder are mutually exclusive")
    values = {}
    if getattr(ns, "config", None):
        values.update(read_config_file(ns.config))
    for k, v in given.items():
        values[k] = _convert(k, v)
    values["command"] = ns.command
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg, ns.verbose


def validate(cfg):
    from .assembly import PENALTY_BAND
    from .benchmarks import CASES

    if cfg.command not in COMMANDS:
        raise ConfigError(f"unknown command {cfg.command!r}")
    if cfg.h is not None and cfg.ladder is not None:
        raise ConfigError("h and ladder are mutually exclusive")
    if cfg.command != "monodomain" and cfg.case not in CASES:
        raise ConfigError(f"unknown case {cfg.case!r}; choose from {sorted(CASES)}")
    if cfg.method not in ("rpimc", "mlpg_mc"):
        raise ConfigError(f"unknown method {cfg.method!r}")
    if not cfg.alpha > 0:
        raise ConfigError("--alpha must be positive")
    lo, hi = PENALTY_BAND
    if not lo <= cfg.alpha <= hi:
        warnings.warn(f"penalty factor {cfg.alpha:g} is outside [{lo:g}, {hi:g}]", RuntimeWarning, stacklevel=2)
    if not 0 < cfg.safety <= 1:
        raise ConfigError("--safety must lie in (0, 1]")
    if cfg.threads < 1:
        raise ConfigError("--threads must be at least 1")


# ------------------------------------------------------------------- runners

def _setup(cfg):
    from . import kernels

    kernels.set_threads(cfg.threads)
    np.random.seed(cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(cfg, out / "config.txt")
    return out


def _backend(cfg):
    return None if cfg.backend == "auto" else cfg.backend


def _penalty(cfg):
    from .assembly import PenaltyConfig

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # already reported in validate
        return PenaltyConfig(cfg.alpha)


def _run_kwargs(cfg):
    return dict(a_c=cfg.a_c, alpha_c=cfg.alpha_c, q_exp=cfg.q_exp, penalty=_penalty(cfg),
                safety=cfg.safety, backend=_backend(cfg))


def write_timings(timings, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "seconds"])
        for phase in PHASES:
            w.writerow([phase, repr(float(timings.get(phase, 0.0)))])
        w.writerow(["total", repr(float(timings["total"]))])


def profile_run(cfg):
    """Run the configured command and return wall times per phase (plus ``total``)."""
    from . import benchmarks, monodomain

    out = _setup(cfg)
    t0 = time.perf_counter()
    timings = dict.fromkeys(PHASES, 0.0)
    progress = sys.stderr if cfg.snapshot_interval > 0 else None
    if cfg.command == "benchmark":
        h = cfg.h if cfg.h is not None else benchmarks.get_case(cfg.case).ladder[0]
        res = benchmarks.run_case(cfg.case, cfg.method, h, progress=progress,
                                  snapshot_interval=cfg.snapshot_interval or None, **_run_kwargs(cfg))
        for k in ("basis", "assembly", "march"):
            timings[k] += res.timings[k]
        rep = benchmarks.ConvergenceReport(cfg.case, cfg.method, [res.h], [res.e2], [res.nrms], [], [], [res])
        t1 = time.perf_counter()
        benchmarks.write_report_csv([rep], out / cfg.csv)
        _echo_results([res])
        timings["output"] = time.perf_counter() - t1
    elif cfg.command == "ladder":
        spacings = cfg.ladder if cfg.ladder is not None else None
        rep = benchmarks.run_ladder(cfg.case, cfg.method, spacings, full=cfg.full, **_run_kwargs(cfg))
        for r in rep.results:
            for k in ("basis", "assembly", "march"):
                timings[k] += r.timings[k]
        t1 = time.perf_counter()
        benchmarks.write_report_csv([rep], out / cfg.csv)
        _echo_results(rep.results, rep)
        timings["output"] = time.perf_counter() - t1
    elif cfg.command == "monodomain":
        scfg = monodomain.SlabConfig(
            edge=cfg.edge, h=cfg.h if cfg.h is not None else 0.05, d0=cfg.d0, rho_aniso=cfg.rho_aniso,
            fiber=cfg.fiber, method=cfg.method, a_c=cfg.a_c if cfg.a_c is not None else 2.1,
            alpha_c=cfg.alpha_c, q_exp=cfg.q_exp, penalty=cfg.alpha, safety=cfg.safety, dt_max=cfg.dt_max,
            stim_face=cfg.stim_face, t_max=cfg.t_max, snapshot_interval=cfg.snapshot_interval,
        )
        res = monodomain.run_slab(scfg, backend=_backend(cfg), progress=progress)
        for k in ("basis", "assembly", "march"):
            timings[k] += res.timings[k]
        t1 = time.perf_counter()
        monodomain.write_lat_csv(res.cloud, res.activation, out / cfg.lat_csv)
        monodomain.write_lat_vtk(res.cloud, res.activation, out / cfg.lat_vtk)
        act = res.activation.activated
        print(f"nodes={len(res.cloud)} dt={res.dt:.6g} steps={res.steps} threshold={res.threshold:.6g} "
              f"activated={int(act.sum())}/{len(act)} max_lat={res.activation.lat[act].max():.6g}")
        timings["output"] = time.perf_counter() - t1
    elif cfg.command == "shape-debug":
        timings.update(_shape_debug(cfg, out))
    timings["total"] = time.perf_counter() - t0
    write_timings(timings, out / "timings.csv")
    return timings


def _echo_results(results, report=None):
    for i, r in enumerate(results):
        rate = ""
        if report is not None and i:
            re2 = report.rates_e2[i - 1]
            rate = f" rate_E2={re2:.3f}" if re2 is not None else ""
        print(f"{r.case} {r.method} h={r.h:.6g} nodes={r.nodes} dt={r.dt:.4g} "
              f"E2={r.e2:.4e} NRMS={r.nrms:.4e}{rate} wall={r.wall_seconds:.2f}s")


def _shape_debug(cfg, out):
    from .assembly import build_system, dump_operator
    from .benchmarks import build_cloud, get_case

    case = get_case(cfg.case)
    h = cfg.h if cfg.h is not None else case.ladder[0]
    cloud = build_cloud(case, h)
    sys_ = build_system(cloud, method="rpi" if cfg.method == "rpimc" else "mls",
                        a_c=cfg.a_c if cfg.a_c is not None else case.default_a_c,
                        alpha_c=cfg.alpha_c, q_exp=cfg.q_exp, penalty=_penalty(cfg), backend=_backend(cfg))
    i = cfg.node
    if not 0 <= i < len(cloud):
        raise ConfigError(f"--node {i} outside [0, {len(cloud)})")
    idx, phi, grad = sys_.shapes.node(i)
    print(f"node {i} at {cloud.positions[i].tolist()} tag={int(cloud.boundary_tags[i])} support={len(idx)}")
    print(f"sum(phi)={phi.sum():.15g} sum(grad)={grad.sum(axis=0).tolist()}")
    rec = phi @ cloud.positions[idx]
    print(f"linear reproduction error={np.abs(rec - cloud.positions[i]).max():.3e}")
    for j, p, g in zip(idx, phi, grad):
        print(f"  {j:8d} phi={p: .6e} grad={np.array2string(g, precision=6)}")
    t1 = time.perf_counter()
    if cfg.dump_operator:
        dump_operator(sys_.stiffness, out / cfg.dump_operator)
    return {"basis": sys_.timings["basis"], "assembly": sys_.timings["assembly"],
            "output": time.perf_counter() - t1}


def main(argv=None):
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            cfg, verbose = parse_config(argv)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        profile_run(cfg)
    except (ConfigError, ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
