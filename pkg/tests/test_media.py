import numpy as np
import pytest

from carlemanlab.grid import Grid, ScalarField
from carlemanlab.media import (CoefficientPair, bracket_quarter, check_admissible,
                               check_pseudoconvexity, profile, pseudoconvexity_constant,
                               wavespeed, xi_directions)

X0 = (-0.5, 0.5, 0.5)


def pair(grid, mu, lam, mu0=0.5, lambda0=0.5, M0=2.0, **kw):
    f = lambda v: ScalarField(grid, "cell", np.broadcast_to(v, grid.shape("cell")).copy())  # noqa: E731
    return CoefficientPair(f(mu), f(lam), mu0, lambda0, M0, **kw)


def exp_pair(grid, a, scale=1.0):
    mu = profile(grid, {"profile": "affine-exp", "value": 1.0, "a": tuple(scale * v for v in a)})
    return pair(grid, mu, 1.0, mu0=0.1, lambda0=1.0, M0=1e3)


def test_wavespeed_pointwise(grid16):
    x, _, _ = grid16.coords("cell")
    mu = 1 + 0.1 * np.sin(x) + 0 * grid16.mesh("cell")[0]
    cp = pair(grid16, mu, 1.0)
    c, c0, cmax = wavespeed(cp)
    np.testing.assert_array_equal(c.data, mu * 1.0)
    assert c0 == 0.25
    assert wavespeed(pair(grid16, 2.0, 3.0))[0].data.min() == 6.0


def test_constant_media_pass_and_exact_varrho(grid16):
    cp = pair(grid16, 1.0, 1.0)
    rep = check_admissible(cp, X0, 0.1)
    assert rep.passed
    assert all(c["passed"] for c in rep.conditions.values())
    assert pseudoconvexity_constant(cp, X0) == pytest.approx(1.0, abs=1e-12)
    assert pseudoconvexity_constant(pair(grid16, 2.0, 2.0, M0=10), X0) == pytest.approx(4.0, abs=1e-12)


def test_constant_media_margin_value(grid16):
    rep = check_pseudoconvexity(pair(grid16, 1.0, 1.0, mu0=0.5, lambda0=2.0), X0, 0.3)
    np.testing.assert_allclose(rep.margin, -(1 - 0.3))


def _critical_a(grid, rho=0.25):
    # |a| max|x - x0| = 2/3 (1 - rho/c0), along e1
    c0 = 0.1
    x, y, z = grid.mesh("cell")
    dist = np.sqrt((x - X0[0]) ** 2 + (y - X0[1]) ** 2 + (z - X0[2]) ** 2).max()
    return (2 / 3) * (1 - rho / c0) / dist, rho


def test_critical_exponential_profile_has_zero_margin():
    g = Grid.unit(32)
    rho = 0.05
    x, y, z = g.mesh("cell")
    dist = np.sqrt((x - X0[0]) ** 2 + (y - X0[1]) ** 2 + (z - X0[2]) ** 2).max()
    amag = (2 / 3) * (1 - rho / 0.1) / dist
    rep = check_pseudoconvexity(exp_pair(g, (amag, 0, 0)), X0, rho)
    assert abs(rep.worst_margin) < 1e-3


def test_steep_profile_fails_at_farthest_cell():
    g = Grid.unit(24)
    rho = 0.05
    x, y, z = g.mesh("cell")
    dist = np.sqrt((x - X0[0]) ** 2 + (y - X0[1]) ** 2 + (z - X0[2]) ** 2)
    amag = (2 / 3) * (1 - rho / 0.1) / dist.max()
    cp = exp_pair(g, (amag, 0, 0), scale=2.0)
    rep = check_admissible(cp, X0, rho)
    assert not rep.conditions["pseudoconvexity"]["passed"]
    pc = rep.pseudoconvexity
    assert dist[pc.worst_index] == pytest.approx(dist.max())
    assert pc.worst_margin == pytest.approx(1 - rho / 0.1, rel=1e-3)


def test_rho_max_is_boundary_of_passing(grid16):
    cp = exp_pair(grid16, (0.3, 0.1, 0.0))
    r = check_pseudoconvexity(cp, X0, 0.01).rho_max
    assert check_pseudoconvexity(cp, X0, r * (1 - 1e-6)).passed
    assert not check_pseudoconvexity(cp, X0, r * (1 + 1e-6)).passed


def test_pseudoconvexity_rejects_bad_inputs(grid16):
    cp = pair(grid16, 1.0, 1.0)
    with pytest.raises(ValueError, match="outside"):
        check_pseudoconvexity(cp, (0.5, 0.5, 0.5), 0.1)
    with pytest.raises(ValueError, match="rho"):
        check_pseudoconvexity(cp, X0, 0.25)


def test_bracket_matches_symbolic_formula():
    import sympy as sp

    x = sp.symbols("x1:4")
    xi = sp.symbols("k1:4")
    x0 = sp.Matrix([-0.5, 0.5, 0.5])
    c = sp.exp(0.3 * x[0] - 0.2 * x[2])
    a = c * sum(k**2 for k in xi)
    psi = sum((x[i] - x0[i]) ** 2 for i in range(3))

    def pb(f, g):
        return sum(sp.diff(f, xi[i]) * sp.diff(g, x[i]) - sp.diff(f, x[i]) * sp.diff(g, xi[i])
                   for i in range(3))

    br = sp.lambdify(x + xi, pb(a, pb(a, psi)) / 4)
    pt, k = np.array([0.3, 0.7, 0.2]), np.array([0.6, -0.2, 0.5])
    cval = np.exp(0.3 * pt[0] - 0.2 * pt[2])
    grad = cval * np.array([0.3, 0.0, -0.2])
    ours = bracket_quarter(cval, grad, pt - np.array([-0.5, 0.5, 0.5]), k[None])[0]
    assert ours == pytest.approx(br(*pt, *k), rel=1e-10)


def test_varrho_against_random_search():
    g = Grid.unit(16)
    cp = exp_pair(g, (0.2, -0.1, 0.05))
    c = cp.mu.data * cp.lam.data
    from carlemanlab.media import _grad_log_c, _offsets
    grad_c = c[None] * _grad_log_c(cp)
    y = _offsets(g, X0)
    rng = np.random.default_rng(7)
    flat = np.unravel_index(rng.integers(0, c.size, 10_000), c.shape)
    xi = rng.standard_normal((10_000, 3))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    gc, yy, cc = grad_c[(slice(None),) + flat], y[(slice(None),) + flat], c[flat]
    vals = (2 * cc**2 * (1 - (gc * yy).sum(0) / (2 * cc))
            + 2 * cc * (gc * xi.T).sum(0) * (yy * xi.T).sum(0)) / (2 * cc)
    got = pseudoconvexity_constant(cp, X0)
    assert got <= vals.min() + 1e-12
    # exact minimum over xi per cell: smallest eigenvalue of the bracket's quadratic form
    gcf, yf, cf = grad_c.reshape(3, -1).T, y.reshape(3, -1).T, c.ravel()
    Q = ((2 * cf**2 - cf * (gcf * yf).sum(1))[:, None, None] * np.eye(3)
         + cf[:, None, None] * (gcf[:, :, None] * yf[:, None, :] + yf[:, :, None] * gcf[:, None, :]))
    exact = (np.linalg.eigvalsh(Q)[:, 0] / (2 * cf)).min()
    assert got == pytest.approx(exact, abs=1e-6)


def test_xi_sampling_refinement_stable(grid16):
    cp = exp_pair(grid16, (0.2, 0.1, 0.0))
    a = pseudoconvexity_constant(cp, X0, xi_directions(seed=1))
    b = pseudoconvexity_constant(cp, X0, xi_directions(seed=2, n_random=400))
    assert abs(a - b) <= 1e-3


def test_admissible_implies_varrho_near_rho(grid16):
    cp = exp_pair(grid16, (0.1, 0.0, 0.0))
    rho = 0.05
    assert check_admissible(cp, X0, rho).passed
    assert pseudoconvexity_constant(cp, X0) >= rho * (1 - 5e-2)


def test_lower_bound_violation_reported(grid16):
    mu = np.ones(grid16.shape("cell"))
    mu[8, 8, 8] = 0.4
    rep = check_admissible(pair(grid16, mu, 1.0, M0=1e6), X0, 0.1)
    assert not rep.conditions["lower_bounds"]["passed"]
    assert rep.conditions["lower_bounds"]["mu_min"] == 0.4


def test_collar_deviation_reported(grid16):
    ref = pair(grid16, 1.0, 1.0)
    mu = np.ones(grid16.shape("cell"))
    mu[0, 5, 5] = 1.1
    cp = pair(grid16, mu, 1.0, M0=1e6, mu_ref=ref.mu, lam_ref=ref.lam)
    rep = check_admissible(cp, X0, 0.1)
    assert not rep.conditions["collar"]["passed"]
    assert rep.conditions["collar"]["margin"] == pytest.approx(0.1)


def test_profile_unknown_rejected(grid16):
    with pytest.raises(ValueError, match="unknown profile"):
        profile(grid16, {"profile": "spline"})
