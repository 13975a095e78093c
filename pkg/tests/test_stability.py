import numpy as np
import pytest

from carlemanlab.grid import Grid, ScalarField
from carlemanlab.media import CoefficientPair
from carlemanlab.solver import build_initial_data
from carlemanlab.stability import (BumpShape, ZeroShape, assemble_K, check_initial_identity,
                                   check_minor, coefficient_norm, cross_block, default_shapes,
                                   fit_holder, k_matrix, linearized_sources, perturbed_pair,
                                   run_linearized, stability_sweep)

X0 = (-0.5, 0.5, 0.5)


def base_pair(grid):
    one = ScalarField.constant(grid, "cell", 1.0)
    return CoefficientPair(one, one, 0.9, 0.9, 60.0)


def test_cross_block_columns():
    v = np.array([1.0, 2.0, 3.0])
    M = cross_block(v)
    for j in range(3):
        np.testing.assert_allclose(M[:, j], np.cross(np.eye(3)[j], v))
    w = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(M @ w, np.cross(w, v))


def test_example_vectors_give_unit_minor():
    e1, e2, e3 = np.eye(3)
    K = k_matrix(e1, e3, e2, e2)
    sub = K[[r - 1 for r in (2, 3, 4, 9, 10, 12)]]
    assert abs(np.linalg.det(sub)) == pytest.approx(1.0)


@pytest.mark.parametrize("n", [16, 24])
def test_minor_condition_on_initial_data(n):
    bundle = assemble_K(build_initial_data(Grid.unit(n)))
    rep = check_minor(bundle)
    assert rep.passed and not rep.failures
    assert rep.min_abs_det == pytest.approx(1.0, abs=1e-10)
    assert rep.max_abs_det == pytest.approx(1.0, abs=1e-10)
    assert bundle.c_star_B == pytest.approx(2.0) and bundle.c_star_D == pytest.approx(2.0)
    assert rep.best_abs_det >= 1.0 - 1e-12


def test_minor_rejects_bad_rows(grid16):
    bundle = assemble_K(build_initial_data(grid16))
    with pytest.raises(ValueError):
        check_minor(bundle, rows=(1, 1, 2, 3, 4, 5))


def test_degenerate_data_fail_minor(grid16):
    ids = build_initial_data(grid16)
    ids.B0 = (ids.B0[0], ids.B0[0])
    ids.D0 = (ids.D0[0], ids.D0[0])
    rep = check_minor(assemble_K(ids))
    assert not rep.passed and rep.failures


def test_bump_gradient_matches_finite_difference():
    b = BumpShape((0.5, 0.4, 0.5), 0.2, 0.3)
    p = np.array([0.55, 0.45, 0.47])
    h = 1e-6
    fd = [(b(*(p + h * e)) - b(*(p - h * e))) / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(b.grad(*p), fd, rtol=1e-6)
    assert b.support_distance(Grid.unit(8)) == pytest.approx(0.2)


def test_default_shapes_stay_inside(grid16):
    g = Grid.unit(24)
    for s in default_shapes(g):
        assert s.support_distance(g) > g.collar_width


def test_linearized_sources_reject_collar_difference(grid16):
    ids = build_initial_data(grid16)
    d = np.zeros(grid16.shape("cell"))
    d[0, 0, 0] = 1.0
    with pytest.raises(ValueError, match="collar"):
        linearized_sources(grid16, d, d * 0, base_pair(grid16), ids.D0[0], ids.B0[0])


@pytest.fixture(scope="module")
def lin_runs():
    g = Grid.unit(24)
    base = base_pair(g)
    shapes = default_shapes(g)
    ids = build_initial_data(g)
    out = {}
    for t in (0.02, 0.04):
        cp1 = perturbed_pair(base, *shapes, t)
        out[t] = run_linearized(cp1, base, ids, 0.6, modes=("direct", "linearized", "frechet"))
    return out


def test_linearized_mode_reproduces_direct_difference(lin_runs):
    for t, runs in lin_runs.items():
        for lr in runs:
            assert lr.discrepancy["linearized"] <= 1e-9 * lr.observation("direct")


def test_frechet_discrepancy_is_quadratic(lin_runs):
    r = [lin_runs[t][0].discrepancy["frechet"] for t in (0.02, 0.04)]
    assert 3.4 <= r[1] / r[0] <= 4.6


def test_observation_linear_in_amplitude(lin_runs):
    e = [lin_runs[t][0].observation("direct") for t in (0.02, 0.04)]
    assert e[1] / e[0] == pytest.approx(2.0, rel=0.05)


def test_unknown_mode_rejected(grid16):
    ids = build_initial_data(grid16)
    with pytest.raises(ValueError, match="mode"):
        run_linearized(base_pair(grid16), base_pair(grid16), ids, 0.1, modes=("guess",))


def test_initial_identity_refines():
    defects = []
    for n in (16, 32):
        g = Grid.unit(n)
        base = base_pair(g)
        shapes = (BumpShape((0.5, 0.5, 0.5), 0.25, 0.2), ZeroShape())
        cp1 = perturbed_pair(base, *shapes, 1.0)
        ids = build_initial_data(g)
        lr = run_linearized(cp1, base, ids, 0.05, modes=("linearized",), keep_history=True)
        rep = check_initial_identity(lr[0].runs["linearized"], ids, 0, *shapes, 1.0)
        assert rep.discrete_mismatch <= 1e-10 * rep.scale + 1e-14
        defects.append(rep.analytic_mismatch)
    assert defects[0] / defects[1] > 2.5


def test_holder_fit_recovers_power_law():
    E = np.array([1.0, 2.0, 4.0, 8.0])
    N = 3.0 * E**0.7
    f = fit_holder(E, N)
    assert f.kappa_hat == pytest.approx(0.7)
    assert f.C_fit == pytest.approx(3.0)
    assert f.C_hat == pytest.approx(3.0)
    assert f.residual < 1e-12


def test_holder_fit_needs_three_points():
    with pytest.raises(ValueError):
        fit_holder([1.0, 2.0], [1.0, 2.0])


def test_coefficient_norm_zero_for_equal_pairs(grid16):
    assert coefficient_norm(base_pair(grid16), base_pair(grid16)) == 0.0


def test_small_sweep_monotone_and_bounded():
    g = Grid.unit(16)
    base = base_pair(g)
    shapes = (BumpShape((0.5, 0.45, 0.5), 0.2, 0.2), BumpShape((0.5, 0.55, 0.5), 0.2, 0.2))
    rep = stability_sweep(base, shapes, [0.01, 0.02, 0.04], build_initial_data(g), 0.8,
                          x0=X0, rho=0.25)
    assert rep.monotone and rep.inequality_holds and not rep.dropped
    assert 0.8 <= rep.fit.kappa_hat <= 1.2
    assert rep.minor.passed and rep.c_star == pytest.approx(2.0)
    assert np.isnan(rep.kappa_running[0]) and np.all(np.isfinite(rep.kappa_running[1:]))


def test_sweep_drops_inadmissible_amplitude():
    g = Grid.unit(16)
    base = base_pair(g)
    shapes = (BumpShape((0.5, 0.45, 0.5), 0.2, 0.2), ZeroShape())
    # a large negative amplitude pushes mu below its lower bound
    rep = stability_sweep(base, shapes, [0.01, 0.02, 0.04, -0.9], build_initial_data(g), 0.4,
                          x0=X0, rho=0.25)
    assert rep.dropped == [-0.9]


def test_noise_is_seeded():
    g = Grid.unit(16)
    base = base_pair(g)
    shapes = (BumpShape((0.5, 0.45, 0.5), 0.2, 0.2), ZeroShape())
    ids = build_initial_data(g)
    a = stability_sweep(base, shapes, [0.01, 0.02, 0.04], ids, 0.4, noise=0.01, seed=5)
    b = stability_sweep(base, shapes, [0.01, 0.02, 0.04], ids, 0.4, noise=0.01, seed=5)
    np.testing.assert_array_equal(a.E, b.E)
