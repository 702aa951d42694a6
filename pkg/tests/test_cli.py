import csv
import math
import subprocess
import sys

import pytest

from rpimc.cli import (
    PHASES, ConfigError, RunConfig, main, parse_config, read_config_file, write_config_file,
)


def test_defaults():
    cfg, verbose = parse_config(["benchmark", "--case", "heat2d_dirichlet"])
    assert not verbose
    assert cfg.h is None and cfg.ladder is None
    assert (cfg.alpha_c, cfg.q_exp, cfg.alpha, cfg.safety, cfg.seed) == (1.5, 1.03, 1e6, 0.9, 42)


def test_alpha_outside_band_warns():
    with pytest.warns(RuntimeWarning, match="outside"):
        cfg, _ = parse_config(["benchmark", "--alpha", "1e8"])
    assert cfg.alpha == 1e8


def test_h_and_ladder_conflict():
    with pytest.raises(ConfigError, match="--h and --ladder"):
        parse_config(["ladder", "--h", "0.1", "--ladder", "0.1,0.05"])


def test_bad_values():
    with pytest.raises(ConfigError):
        parse_config(["benchmark", "--case", "nope"])
    with pytest.raises(ConfigError):
        parse_config(["benchmark", "--safety", "1.5"])
    with pytest.raises(SystemExit):
        parse_config(["benchmark", "--no-such-flag"])
    with pytest.raises(SystemExit):
        parse_config([])
    with pytest.raises((ConfigError, ValueError)):
        parse_config(["benchmark", "--h", "abc"])


def test_pi_expressions():
    cfg, _ = parse_config(["ladder", "--case", "heat3d_insulated", "--ladder", "pi/10,pi/20"])
    assert cfg.ladder == pytest.approx((math.pi / 10, math.pi / 20), rel=1e-15)


def test_flags_override_file_override_defaults(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\ncase = heat3d_inhomogeneous\nalpha = 1e5\nsafety = 0.5  # trailing\n")
    cfg, _ = parse_config(["benchmark", "--config", str(p), "--safety", "0.8"])
    assert cfg.case == "heat3d_inhomogeneous"
    assert cfg.alpha == 1e5
    assert cfg.safety == 0.8
    assert cfg.q_exp == 1.03


def test_config_file_errors(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("colour = red\n")
    with pytest.raises(ConfigError, match="unknown key"):
        read_config_file(p)
    p.write_text("alpha 3\n")
    with pytest.raises(ConfigError, match="key = value"):
        read_config_file(p)


def test_echoed_config_roundtrip(tmp_path):
    cfg, _ = parse_config(["ladder", "--case", "heat3d_insulated", "--ladder", "pi/10,pi/20",
                           "--a-c", "2.5", "--alpha", "1e5", "--out-dir", str(tmp_path)])
    p = tmp_path / "echo.txt"
    write_config_file(cfg, p)
    back = RunConfig(**read_config_file(p))
    assert back == cfg


def _timings(path):
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["phase", "seconds"]
    return {k: float(v) for k, v in rows[1:]}


def test_benchmark_run_writes_outputs(tmp_path, capsys):
    assert main(["benchmark", "--h", "0.25", "--out-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "heat2d_dirichlet rpimc h=0.25" in out
    assert (tmp_path / "config.txt").exists()
    rows = list(csv.DictReader(open(tmp_path / "report.csv")))
    assert len(rows) == 1 and float(rows[0]["E2"]) > 0
    t = _timings(tmp_path / "timings.csv")
    assert list(t) == list(PHASES) + ["total"]
    assert all(v >= 0 for v in t.values())
    assert sum(t[p] for p in PHASES) <= t["total"]


def test_ladder_run_reports_rates(tmp_path):
    assert main(["ladder", "--ladder", "0.25,0.125", "--out-dir", str(tmp_path), "--csv", "lad.csv"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "lad.csv")))
    assert rows[0]["rate_E2"] == "" and float(rows[1]["rate_E2"]) > 1.0


def test_monodomain_run(tmp_path, capsys):
    rc = main(["monodomain", "--edge", "0.2,0.2,0.4", "--t-max", "60", "--out-dir", str(tmp_path)])
    assert rc == 0
    assert "activated=" in capsys.readouterr().out
    lat = list(csv.DictReader(open(tmp_path / "lat.csv")))
    assert len(lat) == 5 * 5 * 9
    assert (tmp_path / "lat.vtk").read_text().startswith("# vtk DataFile")


def test_shape_debug_dumps_operator(tmp_path, capsys):
    rc = main(["shape-debug", "--h", "0.25", "--node", "12", "--dump-operator", "k.txt", "--out-dir", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "node 12 at [0.5, 0.5]" in out
    assert (tmp_path / "k.txt").read_text().split("\n", 1)[0].split()[:2] == ["25", "25"]


def test_failure_exit_code(tmp_path, capsys):
    assert main(["shape-debug", "--h", "0.25", "--node", "999", "--out-dir", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err
    assert main(["benchmark", "--h", "0.3", "--out-dir", str(tmp_path)]) == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rpimc.cli", "benchmark", "--h", "0.25", "--alpha", "1e9",
                           "--out-dir", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "warning: penalty factor 1e+09" in proc.stderr


def test_assembly_time_scales_with_node_count():
    from rpimc.assembly import build_system
    from rpimc.benchmarks import HEAT3D_INSULATED, build_cloud

    best = []
    for h in (math.pi / 8, math.pi / 16):
        c = build_cloud(HEAT3D_INSULATED, h)
        best.append(min(build_system(c, a_c=2.1).timings["assembly"] for _ in range(3)))
    assert 4.0 <= best[1] / best[0] <= 12.0
