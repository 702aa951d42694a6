import csv
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rpimc.benchmarks import (
    CASES, CSV_COLUMNS, HEAT2D, HEAT3D_INHOMOGENEOUS, HEAT3D_INSULATED, MetricWarning,
    analytic_solution, boundary_residual, convergence_rate, error_metrics, fd_pde_residual,
    get_case, run_case, run_ladder, validate_case, write_report_csv,
)


def test_analytic_examples():
    assert analytic_solution("heat2d_dirichlet", [0.5, 0.0], 1.0) == pytest.approx(math.exp(-1), abs=1e-15)
    assert analytic_solution(HEAT3D_INSULATED, [0.3, 1.2, 2.0], 60.0) == pytest.approx(1.0, abs=1e-15)
    x = np.array([[0.4, 1.1, 0.0], [2.0, 0.3, 0.0]])
    np.testing.assert_allclose(analytic_solution(HEAT3D_INHOMOGENEOUS, x, 0.7),
                               np.exp(-1.4) * np.sin(x[:, 0] + x[:, 1]), atol=1e-15)
    with pytest.raises(KeyError, match="unknown benchmark"):
        get_case("heat4d")


@pytest.mark.parametrize("case_id", sorted(CASES))
def test_analytic_solution_satisfies_pde(case_id):
    assert validate_case(case_id, samples=20, seed=42) < 1e-6


@pytest.mark.parametrize("case_id", sorted(CASES))
def test_analytic_solution_satisfies_face_conditions(case_id):
    assert boundary_residual(case_id, n_times=10) < 1e-9


@pytest.mark.parametrize("case_id", sorted(CASES))
def test_closed_form_derivatives_agree_with_fd(case_id):
    case = get_case(case_id)
    rng = np.random.default_rng(7)
    lo, hi = (np.asarray(b) for b in case.box)
    x = lo + (hi - lo) * rng.random((10, case.dim))
    step = 1e-6
    for t in (0.1, 0.8):
        fd = np.column_stack([(case.analytic(x + e, t) - case.analytic(x - e, t)) / (2 * step)
                              for e in np.eye(case.dim) * step])
        np.testing.assert_allclose(case.gradient(x, t), fd, atol=1e-7)
        r = case.time_derivative(x, t) - case.laplacian(x, t)
        if case.reaction is not None:
            r -= case.reaction(t) * case.analytic(x, t)
        if case.source is not None:
            r -= case.source(x, t)
        np.testing.assert_allclose(r, 0.0, atol=1e-12)


def test_wrong_source_is_detected():
    from dataclasses import replace

    broken = replace(HEAT2D, source=lambda x, t: 0.0 * x[:, 0])
    assert np.abs(fd_pde_residual(broken, [[0.3, 0.2]], 0.5)).max() > 1e-2
    with pytest.raises(ValueError, match="misses the PDE"):
        validate_case(broken)


def test_error_metric_examples():
    e = error_metrics([2.0, 3.0], [2.0, 3.0])
    assert (e.e2, e.nrms) == (0.0, 0.0)
    with pytest.warns(MetricWarning, match="NRMS"):
        e = error_metrics([1.0, 2.0], [1.0, 1.0])
    assert e.e2 == pytest.approx(math.sqrt(0.5), rel=1e-15)
    assert e.nrms is None
    u = np.array([0.3, -1.2, 2.5])
    assert error_metrics(2 * u, u).e2 == 1.0
    with pytest.warns(MetricWarning):
        assert error_metrics([1.0], [0.0]).e2 is None


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=30), st.integers(0, 1000))
def test_error_identity(values, seed):
    u_an = np.asarray(values)
    mag = np.abs(u_an)
    if mag.max() - mag.min() < 1e-6 or np.sum(u_an**2) < 1e-12:
        return
    u_h = u_an + 1e-3 * np.random.default_rng(seed).standard_normal(len(u_an))
    e = error_metrics(u_h, u_an)
    assert e.identity_residual < 1e-12


def test_convergence_rate_examples():
    assert convergence_rate(4e-2, 1e-2, 0.2, 0.1) == pytest.approx(2.0, abs=1e-14)
    assert convergence_rate(1e-3, 1e-3, 0.2, 0.1) == 0.0
    assert convergence_rate(1.10e-2, 3.14e-3, 0.1, 0.05) == pytest.approx(1.81, abs=0.01)
    with pytest.raises(ValueError):
        convergence_rate(0.0, 1.0, 0.2, 0.1)
    with pytest.raises(ValueError):
        convergence_rate(1.0, 1.0, 0.1, 0.1)


def test_heat2d_coarse_errors():
    r = run_case(HEAT2D, "rpimc", h=0.1)
    assert r.nodes == 121
    assert r.e2 == pytest.approx(1.10e-2, rel=0.3)
    assert r.errors.identity_residual < 1e-12
    m = run_case(HEAT2D, "mlpg_mc", h=0.1)
    assert m.e2 > r.e2
    assert 2.90e-2 / 3 < m.e2 < 3 * 2.90e-2


def test_run_case_rejects_unknown_method():
    with pytest.raises(ValueError, match="unknown method"):
        run_case(HEAT2D, "fem", h=0.1)


def test_ladder_monotone_with_second_order_rate(tmp_path):
    rep = run_ladder(HEAT2D, "rpimc", spacings=[0.1, 0.05])
    assert rep.e2[1] < rep.e2[0]
    assert 1.6 <= rep.rates_e2[0] <= 2.5
    path = tmp_path / "report.csv"
    write_report_csv([rep], path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == CSV_COLUMNS
    assert len(rows) == 3
    assert rows[1][CSV_COLUMNS.index("rate_E2")] == ""
    assert float(rows[2][CSV_COLUMNS.index("rate_E2")]) == pytest.approx(rep.rates_e2[0])


def test_single_spacing_ladder_has_no_rates():
    rep = run_ladder(HEAT2D, "rpimc", spacings=[0.1])
    assert rep.rates_e2 == [] and rep.rates_nrms == []
    with pytest.raises(ValueError, match="decreasing"):
        run_ladder(HEAT2D, "rpimc", spacings=[0.05, 0.1])


def test_insulated_coarse_error():
    r = run_case(HEAT3D_INSULATED, "rpimc", h=np.pi / 10)
    assert r.e2 == pytest.approx(2.17e-3, rel=0.3)


def test_inhomogeneous_ladder_monotone():
    rep = run_ladder(HEAT3D_INHOMOGENEOUS, "rpimc", spacings=[np.pi / 10, np.pi / 20])
    assert rep.e2[1] < rep.e2[0]
    assert 1.6 <= rep.rates_e2[0] <= 2.5


def test_metric_warning_is_not_raised_on_real_runs():
    with warnings.catch_warnings():
        warnings.simplefilter("error", MetricWarning)
        run_case(HEAT2D, "rpimc", h=0.25)
