import math

import numpy as np
import pytest

from carlemanlab.grid import FACES, LAYOUTS, Grid, ScalarField, VectorField, discrete_curl
from carlemanlab.manufactured import (P_field, Q_field, cavity_frequency, curl_P, curl_Q,
                                      default_problem, mms_error, observed_orders)
from carlemanlab.media import CoefficientPair
from carlemanlab.solver import (BoundaryTraceSeries, EMState, NumericalFailure,
                                SeparableSources, StaggeredMedia, apply_pec, boundary_dof_max,
                                build_initial_data, cfl_dt, cfl_limit, collar_cutoff,
                                decoupled_residual, energy, energy_drift, R1_operator,
                                S1_operator, regularity_bound, run_forward, step,
                                sources_vanish_on_collar, trace_norm_H,
                                trace_norm_H_squared_parts)


def unit_pair(grid, mu=1.0, lam=1.0):
    return CoefficientPair(ScalarField.constant(grid, "cell", mu),
                           ScalarField.constant(grid, "cell", lam), 0.5, 0.5, 10.0)


def smooth_pair(grid):
    x, y, z = grid.mesh("cell")
    mu = 1.0 + 0.2 * np.sin(np.pi * x) * np.sin(np.pi * y) * np.sin(np.pi * z)
    lam = 1.1 + 0.1 * np.cos(np.pi * x) * np.sin(np.pi * z)
    return CoefficientPair(ScalarField(grid, "cell", mu), ScalarField(grid, "cell", lam),
                           0.5, 0.5, 100.0)


@pytest.mark.parametrize("name,field,curl", [("P", P_field, curl_P), ("Q", Q_field, curl_Q)])
def test_manufactured_curls_match_symbolic(name, field, curl):
    import sympy as sp

    x, y, z = sp.symbols("x y z")
    s, c, pi = sp.sin, sp.cos, sp.pi
    if name == "P":
        F = (c(pi * x) * s(pi * y) * s(pi * z), s(pi * x) * c(pi * y) * s(pi * z),
             -2 * s(pi * x) * s(pi * y) * c(pi * z))
    else:
        F = (s(pi * x) * c(pi * y) * c(pi * z), c(pi * x) * s(pi * y) * c(pi * z),
             -2 * c(pi * x) * c(pi * y) * s(pi * z))
    C = (sp.diff(F[2], y) - sp.diff(F[1], z), sp.diff(F[0], z) - sp.diff(F[2], x),
         sp.diff(F[1], x) - sp.diff(F[0], y))
    div = sp.simplify(sum(sp.diff(F[i], v) for i, v in enumerate((x, y, z))))
    assert div == 0
    pts = np.random.default_rng(3).random((5, 3))
    for p in pts:
        ours_f = field(*p)
        ours_c = curl(*p)
        for i in range(3):
            assert float(ours_f[i]) == pytest.approx(float(F[i].subs({x: p[0], y: p[1], z: p[2]})), abs=1e-12)
            assert float(ours_c[i]) == pytest.approx(float(C[i].subs({x: p[0], y: p[1], z: p[2]})), abs=1e-12)


def test_cfl_dt_below_exact_limit(grid16):
    m = StaggeredMedia.from_pair(unit_pair(grid16, 2.0, 2.0))
    assert cfl_dt(grid16, m, 1.0) == pytest.approx(cfl_limit(grid16, m))
    assert cfl_dt(grid16, m, 0.9) < cfl_limit(grid16, m)


def test_cfl_violation_rejected(grid16):
    ids = build_initial_data(grid16)
    cp = unit_pair(grid16)
    with pytest.raises(NumericalFailure, match="CFL"):
        run_forward(grid16, cp, ids.D0[0], ids.B0[0], 0.2,
                    dt=1.05 * cfl_limit(grid16, StaggeredMedia.from_pair(cp)))


def test_unstable_step_detected_as_nan():
    g = Grid.unit(8)
    cp = unit_pair(g)
    rng = np.random.default_rng(0)
    D0 = tuple(rng.standard_normal(g.shape(s)) for s in LAYOUTS["D"])
    B0 = tuple(np.zeros(g.shape(s)) for s in LAYOUTS["B"])
    dt = 1.5 * cfl_limit(g, StaggeredMedia.from_pair(cp))
    with pytest.raises(NumericalFailure):
        with np.errstate(over="ignore", invalid="ignore"):
            run_forward(g, cp, D0, B0, 4000 * dt, dt=dt, check_cfl=False, symmetric=False,
                        keep_history=False, traces=False)


def test_structure_preserved_smooth_media():
    g = Grid.unit(16)
    ids = build_initial_data(g)
    run = run_forward(g, smooth_pair(g), ids.D0[1], ids.B0[1], 0.5, keep_history=False)
    assert run.div_D.max() <= 1e-12
    assert run.div_B.max() <= 1e-12
    assert run.boundary_max == 0.0


def test_apply_pec_zeroes_boundary_dof(grid16, rng):
    D = tuple(rng.standard_normal(grid16.shape(s)) for s in LAYOUTS["D"])
    B = tuple(rng.standard_normal(grid16.shape(s)) for s in LAYOUTS["B"])
    assert boundary_dof_max(grid16, D, B) > 0
    apply_pec(D, B)
    assert boundary_dof_max(grid16, D, B) == 0.0


def test_leapfrog_is_time_reversible(grid16):
    ids = build_initial_data(grid16)
    m = StaggeredMedia.from_pair(smooth_pair(grid16))
    dt = cfl_dt(grid16, m, 0.8)
    s = EMState.from_fields(ids.D0[0], ids.B0[0])
    s0 = s.copy()
    for _ in range(20):
        s = step(s, m, None, dt)
    for _ in range(20):
        s = step(s, m, None, -dt)
    for a, b in zip(s.D + s.B, s0.D + s0.B):
        np.testing.assert_allclose(a, b, atol=1e-11)


def test_energy_drift_second_order():
    g = Grid.unit(16)
    ids = build_initial_data(g)
    cp = smooth_pair(g)
    drifts = []
    for safety in (0.5, 0.25):
        run = run_forward(g, cp, ids.D0[0], ids.B0[0], 0.5, safety=safety, keep_history=False,
                          traces=False)
        drifts.append(energy_drift(run))
    assert 3.4 <= drifts[0] / drifts[1] <= 4.6


def test_energy_functional_matches_quadrature(grid16):
    m = StaggeredMedia.from_pair(unit_pair(grid16, 2.0, 3.0))
    D = tuple(np.ones(grid16.shape(s)) for s in LAYOUTS["D"])
    B = tuple(np.ones(grid16.shape(s)) for s in LAYOUTS["B"])
    # constant fields integrate to volume; tangential boundary edges carry partial weights
    assert energy(m, D, B) == pytest.approx(3 * 3.0 + 3 * 2.0)


def test_manufactured_solution_second_order():
    errs = [mms_error(n) for n in (8, 16, 32)]
    orders = observed_orders((8, 16, 32), errs)
    assert np.all((orders > 1.8) & (orders < 2.2)), orders


def test_cavity_frequency_accurate():
    measured, exact = cavity_frequency(16)
    assert abs(measured - exact) / exact < 0.01
    assert exact == pytest.approx(math.pi * math.sqrt(2))


def test_sources_checked_on_collar(grid16):
    bad = SeparableSources(f_terms=[(lambda t: 1.0, tuple(np.ones(grid16.shape(s))
                                                          for s in LAYOUTS["D"]))])
    assert sources_vanish_on_collar(grid16, bad, [0.0])


def test_collar_cutoff_profile(grid16):
    h = grid16.h[0]
    chi = collar_cutoff(grid16, "node", h, grid16.collar_width - h)
    x, y, z = grid16.mesh("node")
    d = grid16.boundary_distance("node")
    assert np.all(chi[d <= h + 1e-12] == 0.0)
    assert np.all(chi[d >= grid16.collar_width - h - 1e-12] == 1.0)
    assert chi.min() >= 0 and chi.max() <= 1


def test_initial_data_divergence_free_and_constant_inside(grid16):
    ids = build_initial_data(grid16)
    from carlemanlab.grid import discrete_div
    e = [(1, 0, 0), (0, 1, 0)]
    for k in range(2):
        assert np.abs(discrete_div(ids.B0[k]).data).max() < 1e-10
        assert np.abs(discrete_div(ids.D0[k]).data).max() < 1e-10
        # away from the collar the curls equal the bare constant vectors
        bx = ids.B0[k].arrays[k]
        inner = grid16.boundary_distance("face_x" if k == 0 else "face_y") > grid16.collar_width
        np.testing.assert_allclose(bx[inner], 1.0, atol=1e-12)
        assert e[k][k] == 1


def test_initial_data_rejects_thin_collar():
    g = Grid((0, 0, 0), (1, 1, 1), (16, 16, 16), 0.15)
    with pytest.raises(ValueError, match="too thin"):
        build_initial_data(g)


def _constant_series(grid, nt=21, T=1.0, dnu=1.0):
    times = np.linspace(-T, T, nt)
    btau, d = {}, {}
    for f in FACES:
        shp = grid.face_centers(f)[0].shape
        btau[f] = np.zeros((nt, 2) + shp)
        d[f] = np.full((nt,) + shp, dnu)
    return BoundaryTraceSeries(grid, times, btau, d)


def test_trace_norm_of_constant(grid16):
    s = _constant_series(grid16, T=1.0)
    parts = trace_norm_H_squared_parts(s, "Dnu")
    area = grid16.surface_area
    assert parts["H3L2"] == pytest.approx(2.0 * area)
    assert parts["H2H1"] == pytest.approx(2.0 * area)
    assert trace_norm_H(s, "Dnu") == pytest.approx(math.sqrt(4 * 1.0 * area))
    assert trace_norm_H(s, "Btau") == 0.0


def test_trace_norm_needs_seven_levels(grid16):
    with pytest.raises(ValueError, match="7"):
        trace_norm_H(_constant_series(grid16, nt=5))


def test_trace_norm_time_derivatives_of_polynomial():
    g = Grid.unit(8)
    s = _constant_series(g, nt=401, T=1.0)
    for f in FACES:
        s.dnu[f] = np.broadcast_to(s.times[:, None, None] ** 2, s.dnu[f].shape).copy()
    # second-order differences are exact on quadratics: int t^4 + 4 t^2 + 4 over [-1, 1]
    h3 = 2 / 5 + 8 / 3 + 8
    h2 = h3
    parts = trace_norm_H_squared_parts(s, "Dnu")
    assert parts["H3L2"] / g.surface_area == pytest.approx(h3, rel=1e-3)
    assert parts["H2H1"] / g.surface_area == pytest.approx(h2, rel=1e-3)


def test_traces_of_run_and_csv(tmp_path):
    g = Grid.unit(8)
    ids = build_initial_data(g)
    run = run_forward(g, unit_pair(g), ids.D0[0], ids.B0[0], 0.2, keep_history=False)
    assert len(run.traces.times) == len(run.step_times)
    run.traces.write_csv(tmp_path / "tr.csv", header="# test")
    lines = (tmp_path / "tr.csv").read_text().splitlines()
    assert lines[0] == "# test"
    assert lines[1] == "t,face_id,u,v,Btau_u,Btau_v,Dnu"
    assert len(lines) == 2 + len(run.step_times) * 6 * 64


def test_decoupled_residual_second_order():
    res = []
    for n in (16, 32):
        pb = default_problem(n)
        D0, B0 = pb.exact(0.0)
        run = run_forward(pb.grid, pb.media(), D0, B0, 0.08, sources=pb.sources(), safety=0.5,
                          traces=False, diagnostics=False)
        r = decoupled_residual(run, pb.media(), pb.sources(), margin_width=0.125)
        res.append((r.U_residual, r.V_residual))
    res = np.array(res)
    orders = np.log2(res[0] / res[1])
    assert np.all(orders >= 1.8), orders


def test_lower_order_terms_vanish_for_constant_media(rng):
    U = rng.standard_normal((2, 3, 8, 8, 8))
    mu = np.full((8, 8, 8), 1.3)
    lam = np.full((8, 8, 8), 0.7)
    h = (0.1, 0.1, 0.1)
    # only roundoff from the one-sided end stencils survives
    assert np.abs(R1_operator(U, mu, lam, h)).max() < 1e-11
    assert np.abs(S1_operator(U, mu, lam, h)).max() < 1e-11


def test_regularity_bound_positive_and_needs_history():
    g = Grid.unit(8)
    ids = build_initial_data(g)
    run = run_forward(g, unit_pair(g), ids.D0[0], ids.B0[0], 0.3)
    assert np.isfinite(regularity_bound(run)) and regularity_bound(run) > 0
    short = run_forward(g, unit_pair(g), ids.D0[0], ids.B0[0], 0.3, keep_history=False)
    with pytest.raises(ValueError):
        regularity_bound(short)


def test_state_at_matches_history():
    g = Grid.unit(8)
    ids = build_initial_data(g)
    run = run_forward(g, unit_pair(g), ids.D0[0], ids.B0[0], 0.3, stride=2)
    st = run.state_at(0.0)
    np.testing.assert_allclose(st.D[0], ids.D0[0].arrays[0], atol=0)
