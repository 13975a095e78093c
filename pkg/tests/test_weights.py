import math

import numpy as np
import pytest

from carlemanlab.grid import Grid, ScalarField
from carlemanlab.media import CoefficientPair
from carlemanlab.weights import (CarlemanParams, InfeasibleParameters, cutoff_eta, eval_weight,
                                 g_decay, make_s_grid, max_psi0, phi, select_parameters,
                                 validate_params, weighted_integral)

X0 = (-0.5, 0.5, 0.5)


def const_pair(grid, c=1.0):
    f = ScalarField.constant(grid, "cell", math.sqrt(c))
    return CoefficientPair(f, f, 0.5, 0.5, 2.0)


def make(**kw):
    base = dict(x0=X0, gamma=1.0, beta=0.8, beta0=1.0, delta=0.25, eps=0.02, T=2.0,
                varrho=1.0, max_psi0=2.75)
    base.update(kw)
    return CarlemanParams(**base)


def test_max_psi0_unit_box(grid16):
    assert max_psi0(grid16, X0) == pytest.approx(2.75)


def test_d0_d1_closed_form():
    p = make(gamma=1.0, delta=0.5)
    assert p.d0 == pytest.approx(math.exp(0.75))
    assert p.d1 == pytest.approx(math.e)
    assert p.d1 > p.d0


def test_reference_constraint_arithmetic_accepted():
    validate_params(make(), 1.0)


def test_beta_too_small_is_named():
    with pytest.raises(InfeasibleParameters, match=r"beta\*T\^2 > max psi0 \+ delta violated"):
        validate_params(make(beta=0.5), 1.0)


def test_short_time_rejected():
    with pytest.raises(InfeasibleParameters, match="observation time too short"):
        validate_params(make(T=1.5, beta=0.99), 1.0)


def test_beta_above_varrho_rejected():
    with pytest.raises(InfeasibleParameters, match="beta/varrho"):
        validate_params(make(beta=1.2), 1.0)


def test_zero_delta_rejected():
    with pytest.raises(InfeasibleParameters, match="delta"):
        validate_params(make(delta=0.0), 1.0)


def test_select_parameters_feasible_constant_media(grid16):
    p = select_parameters(grid16, const_pair(grid16), X0, gamma=0.3)
    assert p.varrho == pytest.approx(1.0)
    assert p.beta * p.T**2 > p.max_psi0 + p.delta
    assert 0 < p.eps < p.T / 2


def test_select_parameters_rejects_interior_x0(grid16):
    with pytest.raises(InfeasibleParameters, match="outside"):
        select_parameters(grid16, const_pair(grid16), (0.5, 0.5, 0.5))


def test_phi_at_origin_time():
    g = Grid.unit(8)
    p = make(gamma=0.5)
    val = phi(p, g.coords("cell"), 0.0)
    x, y, z = g.mesh("cell")
    np.testing.assert_allclose(val, np.exp(0.5 * ((x + 0.5) ** 2 + (y - .5) ** 2 + (z - .5) ** 2 + 1)))


def test_weight_gap_between_time_zero_and_window_edge(grid16):
    # phi0 >= d1 everywhere and phi < d0 near |t| = T
    p = make()
    w = eval_weight(p, grid16, np.array([-p.T, 0.0, p.T]))
    assert w.min_phi0 >= p.d1
    assert w.phi[0].max() < p.d0


def test_cutoff_eta_plateau_and_support():
    p = make(T=2.0, eps=0.2)
    t = np.array([0.0, 1.5, 1.6, 1.8, 1.9, 2.0])
    eta, _, _ = cutoff_eta(p, t)
    np.testing.assert_allclose(eta[[0, 1, 2]], 1.0)
    np.testing.assert_allclose(eta[[3, 4, 5]], 0.0, atol=1e-14)


def test_cutoff_eta_slope_bound():
    p = make(T=2.0, eps=0.2)
    t = np.linspace(-2, 2, 40001)
    eta, d_eta, _ = cutoff_eta(p, t)
    assert np.abs(d_eta).max() * p.eps == pytest.approx(1.875, rel=1e-6)
    np.testing.assert_allclose(np.gradient(eta, t)[1:-1], d_eta[1:-1], atol=1e-3)
    assert p.s_star == pytest.approx(2 * 1.875 / p.eps)


def test_weighted_integral_huge_exponent_matches_shifted_sum():
    f = np.array([1.0, 2.0, 3.0])
    lw = np.array([1000.0, 1001.0, 999.0])
    v = weighted_integral(f, lw, 0.5)
    ref = 1001.0 + math.log(0.5 * (1 * math.exp(-1) + 2 + 3 * math.exp(-2)))
    assert v.log_value == pytest.approx(ref, rel=1e-14)


def test_weighted_integral_agrees_with_direct_for_small_exponents():
    rng = np.random.default_rng(0)
    f = rng.random(50)
    lw = rng.random(50)
    v = weighted_integral(f, lw, 0.1)
    assert math.exp(v.log_value) == pytest.approx(np.sum(np.exp(lw) * f * 0.1), rel=1e-12)


def test_weighted_integral_zero_and_negative():
    assert weighted_integral(np.zeros(3), np.zeros(3), 1.0).log_value == -np.inf
    with pytest.raises(ValueError):
        weighted_integral(np.array([-1.0]), np.zeros(1), 1.0)


def test_g_decay_matches_trapezoid():
    p = make(gamma=0.5, beta=0.8, T=2.0)
    t = np.linspace(-2, 2, 200001)
    for s in (1.0, 20.0):
        ref = np.trapezoid(np.exp(-2 * s * (1 - np.exp(-0.4 * t**2))), t)
        assert g_decay(p, s) == pytest.approx(ref, rel=1e-7)


def test_g_decay_scales_like_inverse_sqrt_s():
    p = make(gamma=0.5)
    s = np.array([1e3, 4e3])
    g = g_decay(p, s)
    assert g[0] / g[1] == pytest.approx(2.0, rel=1e-2)


def test_make_s_grid():
    s = make_s_grid(5, 60, 12)
    assert len(s) == 12 and s[0] == 5 and s[-1] == pytest.approx(60)
    assert np.allclose(np.diff(np.log(s)), np.log(12) / 11)
    with pytest.raises(ValueError):
        make_s_grid(5, 60, 12, "cubic")
