"""Staggered-grid leapfrog solver for the sourced heterogeneous Maxwell system.

    D' - curl(mu B) = f,   B' + curl(lam D) = g,   D x nu = 0,  B . nu = 0.

D lives on edges, B on faces (see :mod:`carlemanlab.grid`).  One step is
kick-drift-kick so both fields are available at integer time levels:

    B <- B + dt/2 (-curl(lam D) + g(t))
    D <- D + dt   ( curl(mu B)  + f(t + dt/2))
    B <- B + dt/2 (-curl(lam D) + g(t + dt))

which is the Yee leapfrog with synchronised output; it is time reversible,
so negative times are reached by stepping with ``-dt``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import (FACES, LAYOUTS, Grid, ScalarField, VectorField, cell_to_stagger,
                   curl_edge_to_face, curl_face_to_edge, div_edge_to_node,
                   div_face_to_cell, first_derivative, second_derivative,
                   stagger_to_cell)
from .media import CoefficientPair


class NumericalFailure(RuntimeError):
    """NaN/Inf appeared, or the time step breaks the CFL bound."""


# ---------------------------------------------------------------------------
# media on staggered locations

@dataclass
class StaggeredMedia:
    grid: Grid
    mu_face: tuple
    lam_edge: tuple
    mu: np.ndarray
    lam: np.ndarray

    @classmethod
    def from_pair(cls, cp: CoefficientPair) -> "StaggeredMedia":
        return cls.from_arrays(cp.grid, cp.mu.data, cp.lam.data)

    @classmethod
    def from_arrays(cls, grid: Grid, mu: np.ndarray, lam: np.ndarray) -> "StaggeredMedia":
        mu_face = tuple(cell_to_stagger(mu, s) for s in LAYOUTS["B"])
        lam_edge = tuple(cell_to_stagger(lam, s) for s in LAYOUTS["D"])
        return cls(grid, mu_face, lam_edge, np.asarray(mu), np.asarray(lam))


def _as_staggered(media) -> StaggeredMedia:
    if isinstance(media, StaggeredMedia):
        return media
    return StaggeredMedia.from_pair(media)


def cfl_dt(grid: Grid, media, safety: float = 0.9) -> float:
    """``safety * min(h) / (sqrt(3) * max sqrt(mu lam))``."""
    if not 0 < safety:
        raise ValueError("safety must be positive")
    m = _as_staggered(media)
    cmax = float(np.sqrt((m.mu * m.lam).max()))
    return safety * min(grid.h) / (math.sqrt(3.0) * cmax)


def cfl_limit(grid: Grid, media) -> float:
    """Exact von Neumann bound ``1 / (cmax sqrt(sum 1/h^2))`` for the uniform scheme."""
    m = _as_staggered(media)
    cmax = float(np.sqrt((m.mu * m.lam).max()))
    return 1.0 / (cmax * math.sqrt(sum(1.0 / h**2 for h in grid.h)))


# ---------------------------------------------------------------------------
# boundary conditions

def tangential_edge_masks(grid: Grid):
    """Boolean masks of edge DoF lying on the boundary (tangential D)."""
    out = []
    for comp, st in enumerate(LAYOUTS["D"]):
        m = np.zeros(grid.shape(st), dtype=bool)
        for ax in range(3):
            if ax == comp:
                continue
            sl = [slice(None)] * 3
            sl[ax] = 0
            m[tuple(sl)] = True
            sl[ax] = -1
            m[tuple(sl)] = True
        out.append(m)
    return tuple(out)


def normal_face_masks(grid: Grid):
    """Boolean masks of face DoF lying on the boundary (normal B)."""
    out = []
    for comp, st in enumerate(LAYOUTS["B"]):
        m = np.zeros(grid.shape(st), dtype=bool)
        sl = [slice(None)] * 3
        sl[comp] = 0
        m[tuple(sl)] = True
        sl[comp] = -1
        m[tuple(sl)] = True
        out.append(m)
    return tuple(out)


def apply_pec(D, B) -> None:
    """Zero tangential-edge D and normal-face B in place."""
    dx, dy, dz = D
    dx[:, 0, :] = dx[:, -1, :] = 0.0
    dx[:, :, 0] = dx[:, :, -1] = 0.0
    dy[0, :, :] = dy[-1, :, :] = 0.0
    dy[:, :, 0] = dy[:, :, -1] = 0.0
    dz[0, :, :] = dz[-1, :, :] = 0.0
    dz[:, 0, :] = dz[:, -1, :] = 0.0
    bx, by, bz = B
    bx[0] = bx[-1] = 0.0
    by[:, 0] = by[:, -1] = 0.0
    bz[:, :, 0] = bz[:, :, -1] = 0.0


# ---------------------------------------------------------------------------
# state and sources

@dataclass
class EMState:
    D: tuple
    B: tuple
    t: float = 0.0
    half_step_offset: bool = False

    @classmethod
    def from_fields(cls, D: VectorField, B: VectorField, t: float = 0.0) -> "EMState":
        if D.layout != "D" or B.layout != "B":
            raise ValueError("EMState needs D on edges and B on faces")
        return cls(tuple(a.copy() for a in D.arrays), tuple(a.copy() for a in B.arrays), t)

    @classmethod
    def zeros(cls, grid: Grid) -> "EMState":
        return cls(tuple(np.zeros(grid.shape(s)) for s in LAYOUTS["D"]),
                   tuple(np.zeros(grid.shape(s)) for s in LAYOUTS["B"]))

    def copy(self) -> "EMState":
        return EMState(tuple(a.copy() for a in self.D), tuple(a.copy() for a in self.B),
                       self.t, self.half_step_offset)

    def fields(self, grid: Grid) -> tuple[VectorField, VectorField]:
        return (VectorField.from_arrays(grid, "D", self.D),
                VectorField.from_arrays(grid, "B", self.B))


class SourcePair:
    """Time-dependent sources ``f`` (edges) and ``g`` (faces).

    Subclasses return tuples of three arrays or ``None`` for zero.
    ``directional`` gives an instance to use when stepping with the sign of
    ``dt``; stateless sources return themselves.
    """

    carleman_compatible = False

    def f(self, t: float):
        return None

    def g(self, t: float):
        return None

    def directional(self, sign: int) -> "SourcePair":
        return self


class ZeroSources(SourcePair):
    carleman_compatible = True


@dataclass
class SeparableSources(SourcePair):
    """``f(t) = sum_i a_i(t) F_i`` and ``g(t) = sum_j b_j(t) G_j``."""

    f_terms: list = field(default_factory=list)
    g_terms: list = field(default_factory=list)

    @staticmethod
    def _eval(terms, t):
        if not terms:
            return None
        out = None
        for coef, arrs in terms:
            c = float(coef(t))
            if out is None:
                out = [c * a for a in arrs]
            else:
                for o, a in zip(out, arrs):
                    o += c * a
        return tuple(out)

    def f(self, t):
        return self._eval(self.f_terms, t)

    def g(self, t):
        return self._eval(self.g_terms, t)


def sources_vanish_on_collar(grid: Grid, sources: SourcePair, times) -> list:
    """Locations/times where ``f`` or ``g`` is nonzero inside the collar."""
    bad = []
    for t in times:
        for name, val, layout in (("f", sources.f(t), "D"), ("g", sources.g(t), "B")):
            if val is None:
                continue
            for comp, (arr, st) in enumerate(zip(val, LAYOUTS[layout])):
                mask = grid.collar_mask(st) & (arr != 0)
                if mask.any():
                    idx = tuple(int(i) for i in np.argwhere(mask)[0])
                    bad.append((name, comp, float(t), idx))
    return bad


# ---------------------------------------------------------------------------
# stepping

def _curl_lam_D(m: StaggeredMedia, D, h):
    return curl_edge_to_face(*(l * d for l, d in zip(m.lam_edge, D)), h)


def _curl_mu_B(m: StaggeredMedia, B, h):
    return curl_face_to_edge(*(mu * b for mu, b in zip(m.mu_face, B)), h)


def step(state: EMState, media, sources: SourcePair | None, dt: float) -> EMState:
    """Advance one kick-drift-kick step; returns a new state."""
    m = _as_staggered(media)
    h = m.grid.h
    sources = sources or ZeroSources()
    t = state.t
    D = tuple(a.copy() for a in state.D)
    B = tuple(a.copy() for a in state.B)
    _kick(m, sources, D, B, t, 0.5 * dt, h, None)
    _drift(m, sources, D, B, t + 0.5 * dt, dt, h)
    _kick(m, sources, D, B, t + dt, 0.5 * dt, h, None)
    apply_pec(D, B)
    new = EMState(D, B, t + dt)
    _check_finite(new)
    return new


def _kick(m, sources, D, B, t, half_dt, h, curl_cache):
    c = curl_cache if curl_cache is not None else _curl_lam_D(m, D, h)
    g = sources.g(t)
    for i in range(3):
        b = B[i]
        b -= half_dt * c[i]
        if g is not None:
            b += half_dt * g[i]
    return c


def _drift(m, sources, D, B, t_half, dt, h):
    c = _curl_mu_B(m, B, h)
    f = sources.f(t_half)
    for i in range(3):
        d = D[i]
        d += dt * c[i]
        if f is not None:
            d += dt * f[i]


def _check_finite(state: EMState, level: int | None = None):
    for a in state.D + state.B:
        if not np.isfinite(a).all():
            where = f" at time level {level}" if level is not None else ""
            raise NumericalFailure(f"non-finite field value at t={state.t:.6g}{where}")


# ---------------------------------------------------------------------------
# diagnostics

def energy(m: StaggeredMedia, D, B) -> float:
    """``<lam D, D> + <mu B, B>`` with dual-cell quadrature."""
    g = m.grid
    e = 0.0
    for l, d, st in zip(m.lam_edge, D, LAYOUTS["D"]):
        e += float(np.sum(l * d * d * g.quad_weights(st)))
    for mu, b, st in zip(m.mu_face, B, LAYOUTS["B"]):
        e += float(np.sum(mu * b * b * g.quad_weights(st)))
    return e


def divergence_norms(grid: Grid, D, B) -> tuple[float, float]:
    """Max |div| of D (interior nodes) and B (cells), relative to ``max|field| / h``."""
    hmin = min(grid.h)
    sd = max(float(np.abs(a).max()) for a in D)
    sb = max(float(np.abs(a).max()) for a in B)
    dd = float(np.abs(div_edge_to_node(*D, grid.h)).max())
    db = float(np.abs(div_face_to_cell(*B, grid.h)).max())
    return (dd * hmin / sd if sd > 0 else dd, db * hmin / sb if sb > 0 else db)


def boundary_dof_max(grid: Grid, D, B) -> float:
    """Largest |value| among tangential-edge D and normal-face B DoF."""
    out = 0.0
    for a, m in zip(D, tangential_edge_masks(grid)):
        out = max(out, float(np.abs(a[m]).max()))
    for a, m in zip(B, normal_face_masks(grid)):
        out = max(out, float(np.abs(a[m]).max()))
    return out


# ---------------------------------------------------------------------------
# boundary traces

_EXTRAP = (1.875, -1.25, 0.375)


def _extrapolate(a: np.ndarray, axis: int, side: int) -> np.ndarray:
    """Value at the box face from the three nearest cell-centre layers."""
    a = np.moveaxis(a, axis, 0)
    if side:
        a = a[::-1]
    return _EXTRAP[0] * a[0] + _EXTRAP[1] * a[1] + _EXTRAP[2] * a[2]


def _node_avg(a: np.ndarray, axis: int) -> np.ndarray:
    sl0 = [slice(None)] * a.ndim
    sl1 = [slice(None)] * a.ndim
    sl0[axis] = slice(0, -1)
    sl1[axis] = slice(1, None)
    return 0.5 * (a[tuple(sl0)] + a[tuple(sl1)])


def face_traces(D, B) -> dict:
    """Per box face: ``(Btau_u, Btau_v, Dnu)`` at face centres.

    Tangential B components and the normal D component are extrapolated to
    the face along the normal with a three-point one-sided stencil, then
    averaged onto face centres along the tangential axes.
    """
    out = {}
    for axis, side in FACES:
        ta, tb = [a for a in range(3) if a != axis]
        comps = []
        for comp in (ta, tb):
            v = _extrapolate(B[comp], axis, side)       # axes: remaining (ta, tb)
            # B_comp is node-type along its own axis
            v = _node_avg(v, 0 if comp == ta else 1)
            comps.append(v)
        d = _extrapolate(D[axis], axis, side)
        d = _node_avg(_node_avg(d, 0), 1)
        out[(axis, side)] = (comps[0], comps[1], d)
    return out


@dataclass
class BoundaryTraceSeries:
    """Traces on every box face for every time level.

    ``btau[face]`` has shape ``(nt, 2, nu, nv)``, ``dnu[face]`` has shape
    ``(nt, nu, nv)``.
    """

    grid: Grid
    times: np.ndarray
    btau: dict
    dnu: dict

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @classmethod
    def from_levels(cls, grid: Grid, times, levels) -> "BoundaryTraceSeries":
        btau = {f: np.stack([np.stack(lv[f][:2]) for lv in levels]) for f in FACES}
        dnu = {f: np.stack([lv[f][2] for lv in levels]) for f in FACES}
        return cls(grid, np.asarray(times, dtype=float), btau, dnu)

    def __sub__(self, other: "BoundaryTraceSeries") -> "BoundaryTraceSeries":
        if len(self.times) != len(other.times) or not np.allclose(self.times, other.times):
            raise ValueError("trace series sampled at different times")
        return BoundaryTraceSeries(self.grid, self.times,
                                   {f: self.btau[f] - other.btau[f] for f in FACES},
                                   {f: self.dnu[f] - other.dnu[f] for f in FACES})

    def scaled(self, a: float) -> "BoundaryTraceSeries":
        return BoundaryTraceSeries(self.grid, self.times,
                                   {f: a * self.btau[f] for f in FACES},
                                   {f: a * self.dnu[f] for f in FACES})

    def component(self, name: str) -> dict:
        """``{face: array (nt, ncomp, nu, nv)}`` for ``"Btau"`` or ``"Dnu"``."""
        if name == "Btau":
            return self.btau
        if name == "Dnu":
            return {f: v[:, None] for f, v in self.dnu.items()}
        raise ValueError(f"unknown trace component {name!r}")

    def write_csv(self, path, header: str = "") -> None:
        """Columns ``t, face_id, u, v, Btau_u, Btau_v, Dnu``; ``face_id = 2*axis + side``."""
        with open(path, "w") as fh:
            if header:
                fh.write(header.rstrip("\n") + "\n")
            fh.write("t,face_id,u,v,Btau_u,Btau_v,Dnu\n")
            for n, t in enumerate(self.times):
                for face in FACES:
                    axis, side = face
                    ta, tb = [a for a in range(3) if a != axis]
                    u = self.grid.axis_coords(ta, "c")
                    v = self.grid.axis_coords(tb, "c")
                    bt = self.btau[face][n]
                    dn = self.dnu[face][n]
                    fid = 2 * axis + side
                    for i, uu in enumerate(u):
                        for j, vv in enumerate(v):
                            fh.write(f"{t:.12g},{fid},{uu:.12g},{vv:.12g},"
                                     f"{bt[0, i, j]:.12e},{bt[1, i, j]:.12e},{dn[i, j]:.12e}\n")


def extract_traces(grid: Grid, times, D_hist, B_hist) -> BoundaryTraceSeries:
    """Traces from stored histories (each a tuple of 3 arrays with a leading time axis)."""
    levels = []
    for n in range(len(times)):
        levels.append(face_traces(tuple(a[n] for a in D_hist), tuple(a[n] for a in B_hist)))
    return BoundaryTraceSeries.from_levels(grid, times, levels)


def _time_derivs(a: np.ndarray, dt: float, order: int):
    out = [a]
    for _ in range(order):
        out.append(np.gradient(out[-1], dt, axis=0, edge_order=2))
    return out


def _trapz_weights(nt: int, dt: float) -> np.ndarray:
    w = np.full(nt, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def trace_norm_H_squared_parts(series: BoundaryTraceSeries, name: str) -> dict:
    """Squared pieces of the observation norm for one trace component.

    ``H3L2`` = sum_{j<=3} int |d_t^j u|^2, ``H2H1`` = sum_{j<=2} int
    (|d_t^j u|^2 + |grad_tau d_t^j u|^2).
    """
    nt = len(series.times)
    if nt < 7:
        raise ValueError(f"trace series needs at least 7 time levels, got {nt}")
    dt = series.dt
    wt = _trapz_weights(nt, dt)[:, None, None, None]
    g = series.grid
    h3l2 = 0.0
    h2h1 = 0.0
    for face, arr in series.component(name).items():
        axis = face[0]
        ta, tb = [a for a in range(3) if a != axis]
        area = g.face_area_weight(face)
        derivs = _time_derivs(arr, dt, 3)
        for j, d in enumerate(derivs):
            l2 = float(np.sum(wt * d * d)) * area
            h3l2 += l2
            if j <= 2:
                gu = np.gradient(d, g.h[ta], axis=2, edge_order=2)
                gv = np.gradient(d, g.h[tb], axis=3, edge_order=2)
                h2h1 += l2 + float(np.sum(wt * (gu * gu + gv * gv))) * area
    return {"H3L2": h3l2, "H2H1": h2h1}


def trace_norm_H(series: BoundaryTraceSeries, name: str = "both") -> float:
    """Observation norm of ``Btau``, ``Dnu`` or (``"both"``) their combined trace."""
    names = ("Btau", "Dnu") if name == "both" else (name,)
    total = 0.0
    for nm in names:
        parts = trace_norm_H_squared_parts(series, nm)
        total += parts["H3L2"] + parts["H2H1"]
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# forward runs

@dataclass
class ForwardRun:
    grid: Grid
    dt: float
    nsteps: int
    times: np.ndarray              # stored levels
    D_hist: tuple | None           # 3 arrays (nt, ...) or None
    B_hist: tuple | None
    traces: BoundaryTraceSeries | None
    step_times: np.ndarray         # every level in [-T, T]
    energy: np.ndarray
    div_D: np.ndarray
    div_B: np.ndarray
    boundary_max: float
    final_state: EMState = None

    def level(self, t: float) -> int:
        return int(np.argmin(np.abs(self.times - t)))

    def state_at(self, t: float) -> EMState:
        n = self.level(t)
        return EMState(tuple(a[n].copy() for a in self.D_hist),
                       tuple(a[n].copy() for a in self.B_hist), float(self.times[n]))


def _integrate(m, sources, state, dt, nsteps, stride, keep, traces, diag):
    """Run ``nsteps`` steps of size ``dt`` (may be negative); collect every level."""
    g = m.grid
    h = g.h
    D = tuple(a.copy() for a in state.D)
    B = tuple(a.copy() for a in state.B)
    t = state.t
    levels_t, D_keep, B_keep, tr, en, dD, dB = [], [], [], [], [], [], []
    bmax = 0.0

    def record(n):
        nonlocal bmax
        levels_t.append(t)
        if traces:
            tr.append(face_traces(D, B))
        if diag:
            en.append(energy(m, D, B))
            a, b = divergence_norms(g, D, B)
            dD.append(a)
            dB.append(b)
            bmax = max(bmax, boundary_dof_max(g, D, B))
        if keep and n % stride == 0:
            D_keep.append(tuple(a.copy() for a in D))
            B_keep.append(tuple(a.copy() for a in B))

    record(0)
    curl = None
    for n in range(1, nsteps + 1):
        _kick(m, sources, D, B, t, 0.5 * dt, h, curl)
        _drift(m, sources, D, B, t + 0.5 * dt, dt, h)
        t = state.t + n * dt
        apply_pec(D, B)
        curl = _curl_lam_D(m, D, h)
        _kick(m, sources, D, B, t, 0.5 * dt, h, curl)
        apply_pec(D, B)
        if not all(np.isfinite(a).all() for a in D + B):
            raise NumericalFailure(f"non-finite field at step {n} (t={t:.6g})")
        record(n)
    final = EMState(D, B, t)
    return levels_t, D_keep, B_keep, tr, en, dD, dB, bmax, final


def run_forward(grid: Grid, media, D0, B0, T: float, dt: float | None = None,
                sources: SourcePair | None = None, stride: int = 1,
                keep_history: bool = True, traces: bool = True,
                diagnostics: bool = True, symmetric: bool = True,
                safety: float = 0.9, check_cfl: bool = True) -> ForwardRun:
    """Integrate from ``t = 0`` to ``T`` (and to ``-T`` when ``symmetric``).

    ``D0``/``B0`` are VectorFields or raw 3-tuples.  The step is shrunk so
    that ``T`` is an integer number of steps.  History is stored every
    ``stride`` steps (levels are symmetric about 0); traces and diagnostics
    are kept at every step.  ``check_cfl=False`` lets a deliberately
    unstable step through (used to demonstrate the stability boundary).
    """
    m = _as_staggered(media)
    sources = sources or ZeroSources()
    if dt is None:
        dt = cfl_dt(grid, m, safety)
    if check_cfl and dt > cfl_limit(grid, m) * (1 + 1e-12):
        raise NumericalFailure(
            f"dt={dt:.6g} exceeds the CFL limit {cfl_limit(grid, m):.6g}")
    nsteps = max(1, int(math.ceil(T / dt - 1e-9)))
    nsteps = int(math.ceil(nsteps / stride) * stride)
    dt = T / nsteps
    D0 = D0.arrays if isinstance(D0, VectorField) else D0
    B0 = B0.arrays if isinstance(B0, VectorField) else B0
    s0 = EMState(tuple(np.array(a, dtype=float) for a in D0),
                 tuple(np.array(a, dtype=float) for a in B0), 0.0)
    apply_pec(s0.D, s0.B)

    fw = _integrate(m, sources.directional(+1), s0, dt, nsteps, stride,
                    keep_history, traces, diagnostics)
    if symmetric:
        bw = _integrate(m, sources.directional(-1), s0, -dt, nsteps, stride,
                        keep_history, traces, diagnostics)
    else:
        bw = ([0.0], [], [], [], [], [], [], 0.0, None)

    def join(b, f):
        return list(reversed(b[1:])) + list(f) if symmetric else list(f)

    step_times = np.array(join(bw[0], fw[0]))
    tr = None
    if traces:
        tr = BoundaryTraceSeries.from_levels(grid, step_times, join(bw[3], fw[3]))
    D_hist = B_hist = None
    times = step_times[::stride] if symmetric else step_times[::stride]
    if keep_history:
        Dl = join(bw[1], fw[1])
        Bl = join(bw[2], fw[2])
        D_hist = tuple(np.stack([lv[i] for lv in Dl]) for i in range(3))
        B_hist = tuple(np.stack([lv[i] for lv in Bl]) for i in range(3))
        if symmetric:
            times = np.concatenate([-step_times[len(step_times) // 2::stride][::-1][:-1],
                                    step_times[len(step_times) // 2::stride]])
    en = np.array(join(bw[4], fw[4])) if diagnostics else np.array([])
    dD = np.array(join(bw[5], fw[5])) if diagnostics else np.array([])
    dB = np.array(join(bw[6], fw[6])) if diagnostics else np.array([])
    return ForwardRun(grid=grid, dt=dt, nsteps=nsteps, times=times, D_hist=D_hist,
                      B_hist=B_hist, traces=tr, step_times=step_times, energy=en,
                      div_D=dD, div_B=dB, boundary_max=max(fw[7], bw[7]),
                      final_state=fw[8])


def energy_drift(run: ForwardRun) -> float:
    """``max |E(t) - E(0)| / E(0)`` over every level of the run."""
    e = run.energy
    e0 = e[len(e) // 2] if len(run.step_times) and run.step_times[0] < 0 else e[0]
    return float(np.abs(e - e0).max() / e0)


# ---------------------------------------------------------------------------
# initial data

def _smoothstep7(u):
    u = np.clip(u, 0.0, 1.0)
    return u**4 * (35 - 84 * u + 70 * u**2 - 20 * u**3)


def collar_cutoff(grid: Grid, stagger: str, inner: float, outer: float) -> np.ndarray:
    """C^3 cutoff: 0 within ``inner`` of the boundary, 1 beyond ``outer``."""
    out = np.ones(grid.shape(stagger))
    for ax, c in enumerate(grid.coords(stagger)):
        for d in (c - grid.lo[ax], grid.hi[ax] - c):
            out = out * _smoothstep7((d - inner) / (outer - inner))
    return out


@dataclass
class InitialDataSet:
    """Two experiments ``(B0^k, D0^k)``, ``k = 1, 2``."""

    grid: Grid
    B0: tuple          # two VectorFields, B layout
    D0: tuple          # two VectorFields, D layout
    interior_mask: np.ndarray = field(repr=False, default=None)  # cells of Omega \ omega

    def pair(self, k: int):
        return self.D0[k], self.B0[k]


def reference_potentials(grid: Grid):
    """Vector potentials whose curls are e1, e3 (k=1) and e2, e2 (k=2)."""
    xc, yc, zc = (0.5 * (a + b) for a, b in zip(grid.lo, grid.hi))
    zero = lambda x, y, z: 0.0 * x  # noqa: E731
    A_B = [lambda x, y, z: (zero(x, y, z), zero(x, y, z), y - yc),    # curl = e1
           lambda x, y, z: (z - zc, zero(x, y, z), zero(x, y, z))]    # curl = e2
    A_D = [lambda x, y, z: (zero(x, y, z), x - xc, zero(x, y, z)),    # curl = e3
           lambda x, y, z: (z - zc, zero(x, y, z), zero(x, y, z))]    # curl = e2
    return A_B, A_D


def build_initial_data(grid: Grid, variant: str = "reference", potentials=None,
                       cutoff: bool = True) -> InitialDataSet:
    """Divergence-free initial data as discrete curls of cut-off vector potentials.

    B0 = curl(chi A_B) with ``A_B`` on edges, D0 = curl(chi A_D) with ``A_D``
    on faces.  ``chi`` vanishes within one cell of the boundary and equals 1
    from ``collar_width - h`` inwards, so the fields equal the curls of the
    bare potentials on every cell outside the collar.
    """
    hmax = max(grid.h)
    inner, outer = hmax, grid.collar_width - hmax
    if cutoff and outer - inner < 2 * hmax - 1e-12:
        raise ValueError(
            f"collar_width={grid.collar_width} too thin for a C^3 cutoff; need >= {4 * hmax}")
    if variant == "reference":
        A_B, A_D = reference_potentials(grid)
    elif variant == "custom":
        if potentials is None:
            raise ValueError("custom initial data needs potentials=(A_B list, A_D list)")
        A_B, A_D = potentials
    else:
        raise ValueError(f"unknown initial-data variant {variant!r}")
    Bs, Ds = [], []
    for k in range(2):
        pot = []
        for comp, st in enumerate(LAYOUTS["D"]):
            x, y, z = grid.mesh(st)
            chi = collar_cutoff(grid, st, inner, outer) if cutoff else 1.0
            pot.append(chi * np.broadcast_to(A_B[k](x, y, z)[comp], x.shape))
        Bs.append(VectorField.from_arrays(grid, "B", curl_edge_to_face(*pot, grid.h)))
        pot = []
        for comp, st in enumerate(LAYOUTS["B"]):
            x, y, z = grid.mesh(st)
            chi = collar_cutoff(grid, st, inner, outer) if cutoff else 1.0
            pot.append(chi * np.broadcast_to(A_D[k](x, y, z)[comp], x.shape))
        Ds.append(VectorField.from_arrays(grid, "D", curl_face_to_edge(*pot, grid.h)))
    return InitialDataSet(grid, tuple(Bs), tuple(Ds), ~grid.collar_mask("cell"))


# ---------------------------------------------------------------------------
# a posteriori checks on histories

def to_cells(hist: tuple, layout: str) -> np.ndarray:
    """Collocate a history (3 arrays with leading time axis) at cell centres.

    Returns an array of shape ``(nt, 3, nx, ny, nz)``.
    """
    out = []
    for arr, st in zip(hist, LAYOUTS[layout]):
        out.append(np.stack([stagger_to_cell(a, st) for a in arr]))
    return np.stack(out, axis=1)


def _grad(a, h):
    """Gradient over the last three axes."""
    nd = a.ndim
    return np.stack([first_derivative(a, h[i], nd - 3 + i) for i in range(3)], axis=-4)


def _curl(v, h):
    """Curl of a collocated vector array ``(..., 3, nx, ny, nz)``."""
    nd = v.ndim
    d = lambda comp, ax: first_derivative(v[..., comp, :, :, :], h[ax], nd - 4 + ax)  # noqa: E731
    return np.stack([d(2, 1) - d(1, 2), d(0, 2) - d(2, 0), d(1, 0) - d(0, 1)], axis=-4)


def _vlap(v, h):
    nd = v.ndim
    return sum(second_derivative(v, h[ax], nd - 3 + ax) for ax in range(3))


def _cross(a, b):
    return np.stack([a[..., 1, :, :, :] * b[..., 2, :, :, :] - a[..., 2, :, :, :] * b[..., 1, :, :, :],
                     a[..., 2, :, :, :] * b[..., 0, :, :, :] - a[..., 0, :, :, :] * b[..., 2, :, :, :],
                     a[..., 0, :, :, :] * b[..., 1, :, :, :] - a[..., 1, :, :, :] * b[..., 0, :, :, :]],
                    axis=-4)


def R1_operator(U, mu, lam, h):
    """``grad(mu lam) x curl U + curl(mu grad(lam) x U)`` on collocated arrays."""
    g_c = _grad(mu * lam, h)
    g_l = _grad(lam, h)
    return _cross(g_c, _curl(U, h)) + _curl(_cross(mu * g_l, U), h)


def S1_operator(V, mu, lam, h):
    """``-lam (2 (grad mu . grad) V + (lap mu) V) + lam grad(grad mu . V)
    + grad lam x (mu curl V + grad mu x V)``."""
    nd = V.ndim
    g_m = _grad(mu, h)
    lap_m = sum(second_derivative(mu, h[ax], ax) for ax in range(3))
    dirder = sum(g_m[ax] * first_derivative(V, h[ax], nd - 3 + ax) for ax in range(3))
    gm_dot_V = (g_m * V).sum(axis=-4)
    term = -lam * (2.0 * dirder + lap_m * V) + lam * _grad(gm_dot_V, h)
    return term + _cross(_grad(lam, h), mu * _curl(V, h) + _cross(g_m, V))


@dataclass
class DecoupledResidual:
    U_residual: float
    V_residual: float
    U_scale: float
    V_scale: float


def _sample_sources(grid, sources, times):
    f_l, g_l = [], []
    zf = tuple(np.zeros(grid.shape(s)) for s in LAYOUTS["D"])
    zg = tuple(np.zeros(grid.shape(s)) for s in LAYOUTS["B"])
    for t in times:
        f = sources.f(t)
        g = sources.g(t)
        f_l.append(zf if f is None else f)
        g_l.append(zg if g is None else g)
    F = tuple(np.stack([lv[i] for lv in f_l]) for i in range(3))
    G = tuple(np.stack([lv[i] for lv in g_l]) for i in range(3))
    return to_cells(F, "D"), to_cells(G, "B")


def decoupled_residual(run: ForwardRun, media, sources: SourcePair | None = None,
                       margin: int = 2, margin_width: float | None = None) -> DecoupledResidual:
    """Space-time L^2 residual of the decoupled second-order equations.

    Fields and sources are collocated at cell centres; derivatives are
    centred differences.  The residual is measured on cells at least
    ``margin`` layers from the boundary and on interior time levels;
    ``margin_width`` instead fixes the excluded layer in physical units so
    that refinements compare residuals over the same region.
    """
    if run.D_hist is None or len(run.times) < 3:
        raise ValueError("decoupled residual needs a stored history with >= 3 levels")
    g = run.grid
    h = g.h
    cp = media if isinstance(media, CoefficientPair) else None
    mu = cp.mu.data if cp is not None else media.mu
    lam = cp.lam.data if cp is not None else media.lam
    sources = sources or ZeroSources()
    if margin_width is not None:
        margin = max(2, int(math.ceil(margin_width / min(h) - 1e-9)))
    times = run.times
    dts = np.diff(times)
    if not np.allclose(dts, dts[0], rtol=1e-9):
        raise ValueError("history must be uniformly sampled in time")
    tau = float(dts[0])
    U = to_cells(run.D_hist, "D")
    V = to_cells(run.B_hist, "B")
    F, G = _sample_sources(g, sources, times)
    c = mu * lam

    def d2t(a):
        return (a[2:] - 2 * a[1:-1] + a[:-2]) / tau**2

    def dt1(a):
        return (a[2:] - a[:-2]) / (2 * tau)

    Ui, Vi = U[1:-1], V[1:-1]
    rU = d2t(U) - c * _vlap(Ui, h) + R1_operator(Ui, mu, lam, h) - dt1(F) - _curl(mu * G[1:-1], h)
    rV = d2t(V) - c * _vlap(Vi, h) + S1_operator(Vi, mu, lam, h) - dt1(G) + _curl(lam * F[1:-1], h)
    sl = (slice(None), slice(None)) + (slice(margin, -margin),) * 3
    w = tau * np.prod(h)
    return DecoupledResidual(
        U_residual=float(np.sqrt(np.sum(rU[sl] ** 2) * w)),
        V_residual=float(np.sqrt(np.sum(rV[sl] ** 2) * w)),
        U_scale=float(np.sqrt(np.sum(U[1:-1][sl] ** 2) * w)),
        V_scale=float(np.sqrt(np.sum(V[1:-1][sl] ** 2) * w)))


def regularity_bound(run: ForwardRun) -> float:
    """A posteriori ``M``: sup of discrete time derivatives (order <= 3) of
    spatial derivatives (order <= 2) of the collocated history."""
    if run.D_hist is None or len(run.times) < 7:
        raise ValueError("regularity bound needs a stored history with >= 7 levels")
    tau = float(run.times[1] - run.times[0])
    h = run.grid.h
    best = 0.0
    for W in (to_cells(run.D_hist, "D"), to_cells(run.B_hist, "B")):
        for dtW in _time_derivs(W, tau, 3):
            spatial = [dtW]
            g1 = [first_derivative(dtW, h[a], 2 + a) for a in range(3)]
            spatial += g1
            spatial += [first_derivative(g1[a], h[b], 2 + b) for a in range(3) for b in range(3)]
            best = max(best, sum(float(np.abs(s).max()) for s in spatial))
    return best
