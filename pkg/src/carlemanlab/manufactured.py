"""Closed-form solutions used as solver oracles.

The manufactured pair on the unit box is

    D* = a(t) P(x),   P = (cos sin sin, sin cos sin, -2 sin sin cos)(pi x)
    B* = b(t) Q(x),   Q = (sin cos cos, cos sin cos, -2 cos cos sin)(pi x)

Both spatial fields are divergence free, P has zero tangential trace and Q
zero normal trace on the box, so (D*, B*) satisfies the boundary conditions
for any a, b.  The sources follow by substitution, using
``curl(mu B) = mu curl B + grad mu x B``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import LAYOUTS, Grid, ScalarField
from .media import CoefficientPair
from .solver import SeparableSources, StaggeredMedia, cfl_dt, run_forward

PI = math.pi


def P_field(x, y, z):
    sx, cx = np.sin(PI * x), np.cos(PI * x)
    sy, cy = np.sin(PI * y), np.cos(PI * y)
    sz, cz = np.sin(PI * z), np.cos(PI * z)
    return (cx * sy * sz, sx * cy * sz, -2.0 * sx * sy * cz)


def Q_field(x, y, z):
    sx, cx = np.sin(PI * x), np.cos(PI * x)
    sy, cy = np.sin(PI * y), np.cos(PI * y)
    sz, cz = np.sin(PI * z), np.cos(PI * z)
    return (sx * cy * cz, cx * sy * cz, -2.0 * cx * cy * sz)


def curl_P(x, y, z):
    sx, cx = np.sin(PI * x), np.cos(PI * x)
    sy, cy = np.sin(PI * y), np.cos(PI * y)
    cz = np.cos(PI * z)
    return (-3 * PI * sx * cy * cz, 3 * PI * cx * sy * cz, 0.0 * x * y * z)


def curl_Q(x, y, z):
    sx, cx = np.sin(PI * x), np.cos(PI * x)
    sy, cy = np.sin(PI * y), np.cos(PI * y)
    sz = np.sin(PI * z)
    return (3 * PI * cx * sy * sz, -3 * PI * sx * cy * sz, 0.0 * x * y * z)


def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


@dataclass(frozen=True)
class ExpProfile:
    """``value * exp(a . x)`` with its exact gradient."""

    value: float = 1.0
    a: tuple = (0.0, 0.0, 0.0)

    def __call__(self, x, y, z):
        return self.value * np.exp(self.a[0] * x + self.a[1] * y + self.a[2] * z)

    def grad(self, x, y, z):
        v = self(x, y, z)
        return (self.a[0] * v, self.a[1] * v, self.a[2] * v)

    def spec(self) -> dict:
        return {"profile": "affine-exp", "value": self.value, "a": list(self.a),
                "origin": [0.0, 0.0, 0.0]}


@dataclass
class ManufacturedProblem:
    grid: Grid
    mu: ExpProfile
    lam: ExpProfile
    omega: float = 2.0

    # time factors: a(t) = cos(omega t), b(t) = sin(omega t)
    def a(self, t):
        return math.cos(self.omega * t)

    def da(self, t):
        return -self.omega * math.sin(self.omega * t)

    def b(self, t):
        return math.sin(self.omega * t)

    def db(self, t):
        return self.omega * math.cos(self.omega * t)

    def media(self) -> CoefficientPair:
        g = self.grid
        x, y, z = g.mesh("cell")
        mu = ScalarField(g, "cell", self.mu(x, y, z))
        lam = ScalarField(g, "cell", self.lam(x, y, z))
        return CoefficientPair(mu, lam, float(mu.data.min()), float(lam.data.min()), 1e6)

    def exact(self, t: float):
        """``(D*, B*)`` sampled on edges and faces."""
        D = tuple(self.a(t) * P_field(*self.grid.mesh(st))[i]
                  for i, st in enumerate(LAYOUTS["D"]))
        B = tuple(self.b(t) * Q_field(*self.grid.mesh(st))[i]
                  for i, st in enumerate(LAYOUTS["B"]))
        return D, B

    def sources(self) -> SeparableSources:
        g = self.grid
        fP, fM, gQ, gL = [], [], [], []
        for i, st in enumerate(LAYOUTS["D"]):
            x, y, z = g.mesh(st)
            mu = self.mu(x, y, z)
            cq = curl_Q(x, y, z)
            gm_x_Q = _cross(self.mu.grad(x, y, z), Q_field(x, y, z))
            fP.append(np.broadcast_to(P_field(x, y, z)[i], x.shape).copy())
            fM.append(np.broadcast_to(-(mu * cq[i] + gm_x_Q[i]), x.shape).copy())
        for i, st in enumerate(LAYOUTS["B"]):
            x, y, z = g.mesh(st)
            lam = self.lam(x, y, z)
            cp = curl_P(x, y, z)
            gl_x_P = _cross(self.lam.grad(x, y, z), P_field(x, y, z))
            gQ.append(np.broadcast_to(Q_field(x, y, z)[i], x.shape).copy())
            gL.append(np.broadcast_to(lam * cp[i] + gl_x_P[i], x.shape).copy())
        return SeparableSources(f_terms=[(self.da, fP), (self.b, fM)],
                                g_terms=[(self.db, gQ), (self.a, gL)])


def default_problem(n: int) -> ManufacturedProblem:
    return ManufacturedProblem(Grid.unit(n), ExpProfile(1.0, (0.1, 0.05, -0.05)),
                               ExpProfile(1.2, (-0.1, 0.0, 0.05)))


def l2_error(grid: Grid, D, B, D_ex, B_ex) -> float:
    err = 0.0
    for a, b, st in zip(D + B, D_ex + B_ex, LAYOUTS["D"] + LAYOUTS["B"]):
        err += float(np.sum((a - b) ** 2 * grid.quad_weights(st)))
    return math.sqrt(err)


def mms_error(n: int, T: float = 0.5, safety: float = 0.5) -> float:
    """L^2 error at ``t = T`` of the manufactured run on an ``n^3`` grid.

    The step is tied to the mesh, so the error reflects ``O(h^2 + dt^2)``.
    """
    prob = default_problem(n)
    cp = prob.media()
    m = StaggeredMedia.from_pair(cp)
    D0, B0 = prob.exact(0.0)
    run = run_forward(prob.grid, m, D0, B0, T, dt=cfl_dt(prob.grid, m, safety),
                      sources=prob.sources(), keep_history=False, traces=False,
                      diagnostics=False, symmetric=False)
    D_ex, B_ex = prob.exact(T)
    st = run.final_state
    return l2_error(prob.grid, st.D, st.B, D_ex, B_ex)


def observed_orders(ns, errors) -> np.ndarray:
    ns = np.asarray(ns, dtype=float)
    e = np.asarray(errors, dtype=float)
    return np.log(e[:-1] / e[1:]) / np.log(ns[1:] / ns[:-1])


# ---------------------------------------------------------------------------
# cavity eigenmode

def cavity_mode(grid: Grid):
    """Initial data of the (1,1,0) box mode: ``D_z = sin(pi x/Lx) sin(pi y/Ly)``."""
    Lx = grid.hi[0] - grid.lo[0]
    Ly = grid.hi[1] - grid.lo[1]
    X, Y, Z = grid.mesh("edge_z")
    dz = np.sin(PI * (X - grid.lo[0]) / Lx) * np.sin(PI * (Y - grid.lo[1]) / Ly) + 0 * Z
    D0 = (np.zeros(grid.shape("edge_x")), np.zeros(grid.shape("edge_y")), dz)
    B0 = tuple(np.zeros(grid.shape(s)) for s in LAYOUTS["B"])
    omega = PI * math.sqrt(1 / Lx**2 + 1 / Ly**2)
    return D0, B0, omega


def cavity_frequency(n: int, safety: float = 0.5, periods: float = 1.0):
    """Measured and analytic angular frequency of the (1,1,0) mode at ``n^3``.

    The mode amplitude ``a^n`` obeys ``a^{n+1} + a^{n-1} = 2 cos(w dt) a^n``;
    ``cos(w dt)`` is recovered by least squares over the run.
    """
    grid = Grid.unit(n)
    one = ScalarField.constant(grid, "cell", 1.0)
    cp = CoefficientPair(one, one, 1.0, 1.0, 10.0)
    D0, B0, omega = cavity_mode(grid)
    m = StaggeredMedia.from_pair(cp)
    T = periods * 2 * PI / omega
    run = run_forward(grid, m, D0, B0, T, dt=cfl_dt(grid, m, safety), traces=False,
                      diagnostics=False, symmetric=False)
    shape = D0[2]
    a = np.einsum("tijk,ijk->t", run.D_hist[2], shape)
    cosw = np.sum((a[2:] + a[:-2]) * a[1:-1]) / (2 * np.sum(a[1:-1] ** 2))
    return math.acos(cosw) / run.dt, omega
