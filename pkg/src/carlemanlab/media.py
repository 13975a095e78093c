"""Electromagnetic coefficients and their admissibility checks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Grid, ScalarField, derivative_table, first_derivative

XI_SEED = 20240611
N_RANDOM_XI = 100


@dataclass(frozen=True)
class CoefficientPair:
    """Cell-centred ``mu`` and ``lam`` with the bounds of the admissible class.

    ``mu_ref`` / ``lam_ref`` hold the prescribed values on the boundary
    collar; samples outside the collar are ignored.
    """

    mu: ScalarField
    lam: ScalarField
    mu0: float
    lambda0: float
    M0: float
    mu_ref: ScalarField = None
    lam_ref: ScalarField = None

    def __post_init__(self):
        for name in ("mu", "lam"):
            if getattr(self, name).stagger != "cell":
                raise ValueError(f"{name} must be cell-centred")
        if self.mu.grid != self.lam.grid:
            raise ValueError("mu and lam live on different grids")
        if self.mu0 <= 0 or self.lambda0 <= 0:
            raise ValueError("mu0 and lambda0 must be positive")
        if self.mu_ref is None:
            object.__setattr__(self, "mu_ref", self.mu)
        if self.lam_ref is None:
            object.__setattr__(self, "lam_ref", self.lam)

    @property
    def grid(self) -> Grid:
        return self.mu.grid

    @property
    def c0(self) -> float:
        return self.mu0 * self.lambda0

    def with_fields(self, mu: np.ndarray, lam: np.ndarray) -> "CoefficientPair":
        g = self.grid
        return CoefficientPair(ScalarField(g, "cell", mu), ScalarField(g, "cell", lam),
                               self.mu0, self.lambda0, self.M0, self.mu_ref, self.lam_ref)


# ---------------------------------------------------------------------------
# closed-form profiles

def bump(grid: Grid, center, radius: float, stagger: str = "cell") -> np.ndarray:
    """Polynomial bump ``(1 - r^2/R^2)^4`` (C^3, compact support)."""
    x, y, z = grid.coords(stagger)
    r2 = (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2
    q = np.clip(1.0 - r2 / radius**2, 0.0, None)
    return np.broadcast_to(q**4, grid.shape(stagger)).copy()


def profile(grid: Grid, spec: dict) -> np.ndarray:
    """Cell samples of a named profile.

    ``constant``: ``value``.  ``affine-exp``: ``value * exp(a . (x - origin))``.
    ``bump``: ``value + amp * bump(center, radius)``.
    """
    kind = spec.get("profile", "constant")
    value = float(spec.get("value", 1.0))
    x, y, z = grid.coords("cell")
    shp = grid.shape("cell")
    if kind == "constant":
        return np.full(shp, value)
    if kind == "affine-exp":
        a = np.asarray(spec.get("a", (0.0, 0.0, 0.0)), dtype=float)
        o = np.asarray(spec.get("origin", (0.0, 0.0, 0.0)), dtype=float)
        return np.broadcast_to(
            value * np.exp(a[0] * (x - o[0]) + a[1] * (y - o[1]) + a[2] * (z - o[2])), shp
        ).copy()
    if kind == "bump":
        return value + float(spec.get("amp", 0.0)) * bump(
            grid, spec.get("center", [0.5 * (a + b) for a, b in zip(grid.lo, grid.hi)]),
            float(spec.get("radius", 0.25)))
    raise ValueError(f"unknown profile {kind!r}")


# ---------------------------------------------------------------------------

def wavespeed(cp: CoefficientPair) -> tuple[ScalarField, float, float]:
    """``c = mu * lam`` with ``c0 = mu0 * lambda0`` and ``max c``."""
    c = cp.mu.data * cp.lam.data
    return ScalarField(cp.grid, "cell", c), cp.c0, float(c.max())


def _grad_log_c(cp: CoefficientPair):
    g = cp.grid
    logc = np.log(cp.mu.data * cp.lam.data)
    return np.stack([first_derivative(logc, g.h[a], a) for a in range(3)])


def _offsets(grid: Grid, x0):
    x, y, z = grid.coords("cell")
    return np.stack(np.broadcast_arrays(x - x0[0], y - x0[1], z - x0[2]))


@dataclass
class PseudoconvexityReport:
    passed: bool
    worst_margin: float
    worst_index: tuple
    worst_point: tuple
    rho: float
    rho_max: float
    margin: np.ndarray = field(repr=False)


def check_pseudoconvexity(cp: CoefficientPair, x0, rho: float) -> PseudoconvexityReport:
    """Gradient bound ``1.5 |grad log c| |x - x0| <= 1 - rho/c0`` on cell centres.

    ``margin`` is left side minus right side, so the check passes when every
    margin is ``<= 0``.  ``rho_max`` is the largest ``rho`` that would pass.
    """
    g = cp.grid
    x0 = np.asarray(x0, dtype=float)
    if g.contains_closed(x0):
        raise ValueError(f"x0={tuple(x0)} must lie outside the closed box")
    c0 = cp.c0
    if not 0.0 < rho < c0:
        raise ValueError(f"rho={rho} must lie in (0, c0={c0})")
    grad = _grad_log_c(cp)
    dist = np.sqrt((_offsets(g, x0) ** 2).sum(axis=0))
    lhs = 1.5 * np.sqrt((grad**2).sum(axis=0)) * dist
    margin = lhs - (1.0 - rho / c0)
    idx = np.unravel_index(int(np.argmax(margin)), margin.shape)
    x, y, z = g.mesh("cell")
    point = (float(x[idx]), float(y[idx]), float(z[idx]))
    rho_max = c0 * (1.0 - float(lhs.max()))
    return PseudoconvexityReport(
        passed=bool(margin.max() <= 0.0), worst_margin=float(margin.max()),
        worst_index=tuple(int(i) for i in idx), worst_point=point, rho=rho,
        rho_max=rho_max, margin=margin)


def xi_directions(seed: int = XI_SEED, n_random: int = N_RANDOM_XI) -> np.ndarray:
    """The 26 lattice directions plus seeded random unit vectors."""
    lattice = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1)
                        for k in (-1, 0, 1) if (i, j, k) != (0, 0, 0)], dtype=float)
    rng = np.random.default_rng(seed)
    rand = rng.standard_normal((n_random, 3))
    dirs = np.vstack([lattice, rand])
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def bracket_quarter(c, grad_c, y, xi):
    """Quarter of the iterated Poisson bracket of ``a = c|xi|^2`` with ``|x-x0|^2``.

    ``c`` broadcasts against the trailing shapes of ``grad_c`` and ``y``
    (leading axis 3); ``xi`` has shape ``(m, 3)``.  Result has shape
    ``(m, ...)``.
    """
    xi = np.asarray(xi, dtype=float)
    xi2 = (xi**2).sum(axis=1)
    gc_y = (grad_c * y).sum(axis=0)
    gc_xi = np.tensordot(xi, grad_c, axes=(1, 0))
    y_xi = np.tensordot(xi, y, axes=(1, 0))
    extra = (slice(None),) + (None,) * np.ndim(c)
    return (2.0 * c**2 * (1.0 - gc_y / (2.0 * c)) * xi2[extra]
            + 2.0 * c * gc_xi * y_xi)


def pseudoconvexity_constant(cp: CoefficientPair, x0, xi=None) -> float:
    """Lower bound of the bracket over ``8 c |xi|^2`` across cells and directions.

    Besides the sampled directions, each cell also tries the direction that
    minimises the (quadratic in ``xi``) bracket there, so the sample set only
    has to catch nothing the closed form misses.
    """
    g = cp.grid
    x0 = np.asarray(x0, dtype=float)
    if g.contains_closed(x0):
        raise ValueError(f"x0={tuple(x0)} must lie outside the closed box")
    c = cp.mu.data * cp.lam.data
    grad_c = c[None] * _grad_log_c(cp)
    y = _offsets(g, x0)
    dirs = xi_directions() if xi is None else np.asarray(xi, dtype=float)
    vals = bracket_quarter(c, grad_c, y, dirs) / (2.0 * c[None])
    best = vals.min(axis=0)
    # per-cell minimiser: eigenvector of the symmetric part of grad_c y^T
    sym = 0.5 * (np.einsum("i...,j...->...ij", grad_c, y)
                 + np.einsum("i...,j...->...ij", y, grad_c))
    _, vecs = np.linalg.eigh(sym)
    vmin = np.moveaxis(vecs[..., :, 0], -1, 0)
    q = (2.0 * c**2 * (1.0 - (grad_c * y).sum(0) / (2.0 * c))
         + 2.0 * c * (grad_c * vmin).sum(0) * (y * vmin).sum(0)) / (2.0 * c)
    # bracket/4 >= 2 varrho c |xi|^2  <=>  varrho <= bracket/(8 c |xi|^2)
    return float(np.minimum(best, q).min())


@dataclass
class AdmissibilityReport:
    passed: bool
    conditions: dict
    varrho: float
    pseudoconvexity: PseudoconvexityReport


def c2_norm(cp: CoefficientPair) -> float:
    """Discrete C^2 norm: sum of sup norms of all derivatives of order <= 2, max over the pair."""
    g = cp.grid
    out = 0.0
    for f in (cp.mu.data, cp.lam.data):
        tab = derivative_table(f, g.h)
        out = max(out, sum(float(np.abs(d).max()) for d in tab.values()))
    return out


def check_admissible(cp: CoefficientPair, x0, rho: float) -> AdmissibilityReport:
    """Run every admissibility condition and collect margins (negative = slack)."""
    g = cp.grid
    collar = g.collar_mask("cell")
    conds = {}
    m_mu = float(cp.mu0 - cp.mu.data.min())
    m_lam = float(cp.lambda0 - cp.lam.data.min())
    conds["lower_bounds"] = {"passed": m_mu <= 0 and m_lam <= 0,
                             "margin": max(m_mu, m_lam),
                             "mu_min": float(cp.mu.data.min()),
                             "lambda_min": float(cp.lam.data.min())}
    dev = 0.0
    if collar.any():
        dev = max(float(np.abs(cp.mu.data - cp.mu_ref.data)[collar].max()),
                  float(np.abs(cp.lam.data - cp.lam_ref.data)[collar].max()))
    conds["collar"] = {"passed": dev == 0.0, "margin": dev}
    c2 = c2_norm(cp)
    conds["c2_bound"] = {"passed": c2 <= cp.M0, "margin": c2 - cp.M0, "c2_norm": c2}
    pc = check_pseudoconvexity(cp, x0, rho)
    conds["pseudoconvexity"] = {"passed": pc.passed, "margin": pc.worst_margin,
                                "worst_point": pc.worst_point, "rho_max": pc.rho_max}
    varrho = pseudoconvexity_constant(cp, x0)
    return AdmissibilityReport(passed=all(c["passed"] for c in conds.values()),
                               conditions=conds, varrho=varrho, pseudoconvexity=pc)
