"""Two-sided evaluation of the weighted inequalities over a sweep of ``s``.

Every weighted integral ``int e^{2 s phi} I`` is evaluated in log space
(``logsumexp`` of ``2 s phi + log(I w)``), so large ``s`` never overflows.
For ``s <= 5`` the same integrals are also summed directly and the two paths
are compared.  An inequality "holds with some constant" when the ratio
LHS/RHS stays bounded over the sweep; see :func:`ratio_verdict`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .grid import FACES, LAYOUTS, Grid, first_derivative, second_derivative
from .media import CoefficientPair
from .solver import extract_traces, to_cells
from .weights import CarlemanParams, cutoff_eta, phi

DIRECT_CHECK_S = 5.0
KNEE_FACTOR = 1.05

INEQUALITIES = ("scalar_hyperbolic", "maxwell_full", "maxwell_trace", "time_zero", "div_curl")


# ---------------------------------------------------------------------------
# weighted integrals

class WeightedIntegrand:
    """``s -> int e^{2 s phi} I dx (dt)`` for a fixed nonnegative integrand."""

    def __init__(self, phi_vals, integrand, weights):
        I = np.asarray(integrand, dtype=float)
        ph = np.broadcast_to(np.asarray(phi_vals, dtype=float), I.shape)
        w = np.broadcast_to(np.asarray(weights, dtype=float), I.shape)
        b = (I * w).ravel()
        keep = b > 0
        if np.any(b < 0):
            raise ValueError("negative integrand in a weighted norm")
        self.phi = ph.ravel()[keep]
        self.logb = np.log(b[keep])
        self.b = b[keep]

    @property
    def is_zero(self) -> bool:
        return self.b.size == 0

    def log_value(self, s: float) -> float:
        if self.is_zero:
            return -np.inf
        return float(logsumexp(2.0 * s * self.phi + self.logb))

    def direct_value(self, s: float) -> float:
        return float(np.sum(np.exp(2.0 * s * self.phi) * self.b))


def _time_weights(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    w = np.zeros_like(times)
    d = np.diff(times)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


def _check_uniform(times) -> float:
    times = np.asarray(times, dtype=float)
    if len(times) < 3:
        raise ValueError("need at least 3 time levels")
    d = np.diff(times)
    if not np.allclose(d, d[0], rtol=1e-9, atol=0):
        raise ValueError("time levels must be uniformly spaced")
    return float(d[0])


def _extrap_face(q: np.ndarray, face) -> np.ndarray:
    """Three-point one-sided extrapolation of cell data (``(..., nx, ny, nz)``) to a box face."""
    axis, side = face
    ax = q.ndim - 3 + axis
    a = np.moveaxis(q, ax, 0)
    if side:
        a = a[::-1]
    return 1.875 * a[0] - 1.25 * a[1] + 0.375 * a[2]


def _phi_faces(params, grid, times):
    out = {}
    for face in FACES:
        pts = grid.face_centers(face)
        out[face] = phi(params, pts, times)
    return out


# ---------------------------------------------------------------------------
# reports

@dataclass
class CarlemanReport:
    inequality: str
    s: np.ndarray
    log_lhs: np.ndarray
    term_names: tuple
    log_rhs_terms: np.ndarray        # (ns, nterms)
    ratio: np.ndarray
    knee: int
    C_hat: float
    passed: bool
    direct_check: float              # max relative gap of log vs direct path (s <= 5)
    extra: dict = field(default_factory=dict)

    @property
    def log_rhs(self) -> np.ndarray:
        return logsumexp(self.log_rhs_terms, axis=1)

    def rows(self):
        for i, s in enumerate(self.s):
            yield [self.inequality, float(s), float(self.log_lhs[i])] + \
                [float(v) for v in self.log_rhs_terms[i]] + [float(self.ratio[i])]

    def summary(self) -> dict:
        return {"inequality": self.inequality, "C_hat": self.C_hat, "passed": self.passed,
                "knee_s": float(self.s[self.knee]) if len(self.s) else None,
                "terms": list(self.term_names), "direct_check": self.direct_check,
                "ratio_min": float(np.min(self.ratio)) if len(self.ratio) else None,
                "ratio_max": float(np.max(self.ratio)) if len(self.ratio) else None,
                **self.extra}


def write_reports_csv(path, reports, header: str = "") -> None:
    """Columns ``inequality, s, log_lhs, log_rhs_term_1..n, ratio`` (``n`` = widest report)."""
    n = max((len(r.term_names) for r in reports), default=0)
    with open(path, "w") as fh:
        if header:
            fh.write(header.rstrip("\n") + "\n")
        for r in reports:
            fh.write(f"# {r.inequality} terms: {', '.join(r.term_names)}\n")
        cols = ["inequality", "s", "log_lhs"] + [f"log_rhs_term_{i + 1}" for i in range(n)] + ["ratio"]
        fh.write(",".join(cols) + "\n")
        for r in reports:
            for row in r.rows():
                terms = row[3:-1] + [float("nan")] * (n - len(row[3:-1]))
                vals = [row[0], f"{row[1]:.12g}", _fmt(row[2])] + [_fmt(v) for v in terms] + \
                    [_fmt(row[-1])]
                fh.write(",".join(vals) + "\n")


def _fmt(v: float) -> str:
    if math.isnan(v):
        return ""
    if math.isinf(v):
        return "-inf" if v < 0 else "inf"
    return f"{v:.12e}"


def find_knee(ratio, factor: float = KNEE_FACTOR) -> int:
    """Smallest index past which the ratio never rises by more than ``factor`` per step."""
    r = np.asarray(ratio, dtype=float)
    knee = len(r) - 1
    for i in range(len(r) - 2, -1, -1):
        if r[i + 1] <= factor * r[i]:
            knee = i
        else:
            break
    return max(knee, 0)


def ratio_verdict(ratio) -> tuple[int, float, bool]:
    """``(knee, C_hat, passed)``.

    Passes when every ratio is finite and the largest ratio over the upper
    half of the sweep does not exceed the largest over the lower half.
    """
    r = np.asarray(ratio, dtype=float)
    if r.size == 0:
        return 0, 0.0, True
    if not np.all(np.isfinite(r)):
        return 0, float("inf"), False
    knee = find_knee(r)
    C_hat = float(np.max(r[knee:]))
    half = len(r) // 2
    passed = bool(np.max(r[half:]) <= np.max(r[:max(half, 1)]))
    return knee, C_hat, passed


def _assemble(inequality, s_grid, lhs_fn, rhs_fns, direct_fns=None, extra=None) -> CarlemanReport:
    """``lhs_fn(s)`` and each ``rhs_fns[name](s)`` return log-values."""
    s_grid = np.asarray(s_grid, dtype=float)
    names = tuple(rhs_fns)
    L = np.array([lhs_fn(s) for s in s_grid])
    R = np.array([[rhs_fns[n](s) for n in names] for s in s_grid]).reshape(len(s_grid), len(names))
    logR = logsumexp(R, axis=1) if len(names) else np.full(len(s_grid), -np.inf)
    ratio = np.empty(len(s_grid))
    for i in range(len(s_grid)):
        if np.isneginf(L[i]) and np.isneginf(logR[i]):
            ratio[i] = 0.0
        elif np.isneginf(logR[i]):
            ratio[i] = np.inf
        else:
            ratio[i] = math.exp(L[i] - logR[i])
    knee, C_hat, passed = ratio_verdict(ratio)
    gap = 0.0
    if direct_fns is not None:
        for s in s_grid[s_grid <= DIRECT_CHECK_S]:
            for logf, dirf in direct_fns:
                lv, dv = logf(s), dirf(s)
                if dv > 0 and np.isfinite(lv):
                    gap = max(gap, abs(math.exp(lv - math.log(dv)) - 1.0))
    return CarlemanReport(inequality, s_grid, L, names, R, ratio, knee, C_hat, passed, gap,
                          dict(extra or {}))


def _s_grid(params: CarlemanParams, s_grid):
    if s_grid is not None:
        return np.asarray(s_grid, dtype=float)
    if params.s_grid:
        return np.asarray(params.s_grid, dtype=float)
    return np.geomspace(5.0, 60.0, 12)


# ---------------------------------------------------------------------------
# scalar hyperbolic operator

def scalar_operator(v, times, cp: CoefficientPair, first_order=None):
    """``P v = v_tt - div(c grad v) + R v`` on cell data ``v`` of shape ``(nt, nx, ny, nz)``."""
    g = cp.grid
    tau = _check_uniform(times)
    c = cp.mu.data * cp.lam.data
    vtt = second_derivative(v, tau, 0)
    Pv = vtt.copy()
    for a in range(3):
        Pv -= c * second_derivative(v, g.h[a], a + 1)
        Pv -= first_derivative(c, g.h[a], a) * first_derivative(v, g.h[a], a + 1)
    if first_order is not None:
        Pv += first_order(v)
    return Pv


def verify_scalar_hyperbolic(v, times, cp: CoefficientPair, params: CarlemanParams,
                             s_grid=None, first_order=None, end_tol: float = 1e-10) -> CarlemanReport:
    """Both sides of the weighted estimate for ``P``.

    LHS ``s int e^{2 s phi} (|grad v|^2 + |v_t|^2 + s^2 |v|^2)``; RHS terms
    ``int e^{2 s phi} |P v|^2`` and the lateral-boundary term
    ``int_Sigma s e^{2 s phi} (|grad v|^2 + |v_t|^2 + s^2 |v|^2)``.
    """
    g = cp.grid
    v = np.asarray(v, dtype=float)
    tau = _check_uniform(times)
    scale = float(np.abs(v).max()) if v.size else 0.0
    vt = np.gradient(v, tau, axis=0, edge_order=2)
    if scale > 0:
        end = max(np.abs(v[0]).max(), np.abs(v[-1]).max(),
                  tau * np.abs(vt[0]).max(), tau * np.abs(vt[-1]).max())
        if end > end_tol * scale:
            raise ValueError(f"v and v_t must vanish at t = -T and t = T (end size {end:.3g})")
    grads = [first_derivative(v, g.h[a], a + 1) for a in range(3)]
    G = vt**2 + sum(d**2 for d in grads)
    Pv = scalar_operator(v, times, cp, first_order)
    ph = phi(params, g.coords("cell"), times)
    w = _time_weights(times)[:, None, None, None] * np.prod(g.h)
    I_G = WeightedIntegrand(ph, G, w)
    I_v = WeightedIntegrand(ph, v**2, w)
    I_P = WeightedIntegrand(ph, Pv**2, w)
    # boundary quantities
    phf = _phi_faces(params, g, times)
    wt = _time_weights(times)[:, None, None]
    bG_parts, bv_parts = [], []
    for face in FACES:
        wf = wt * g.face_area_weight(face)
        Gf = _extrap_face(vt, face) ** 2 + sum(_extrap_face(d, face) ** 2 for d in grads)
        bG_parts.append((phf[face], Gf, wf))
        bv_parts.append((phf[face], _extrap_face(v, face) ** 2, wf))
    I_bG = _concat(bG_parts)
    I_bv = _concat(bv_parts)

    def lhs(s):
        return np.logaddexp(math.log(s) + I_G.log_value(s), 3 * math.log(s) + I_v.log_value(s))

    def bnd(s):
        return np.logaddexp(math.log(s) + I_bG.log_value(s), 3 * math.log(s) + I_bv.log_value(s))

    def bnd_direct(s):
        return s * I_bG.direct_value(s) + s**3 * I_bv.direct_value(s)

    def lhs_direct(s):
        return s * I_G.direct_value(s) + s**3 * I_v.direct_value(s)

    return _assemble("scalar_hyperbolic", _s_grid(params, s_grid), lhs,
                     {"Pv": I_P.log_value, "boundary": bnd},
                     [(lhs, lhs_direct), (I_P.log_value, I_P.direct_value), (bnd, bnd_direct)])


def _concat(parts) -> WeightedIntegrand:
    ph = np.concatenate([np.broadcast_to(p, I.shape).ravel() for p, I, _ in parts])
    I = np.concatenate([I.ravel() for _, I, _ in parts])
    w = np.concatenate([np.broadcast_to(w, Iv.shape).ravel() for _, Iv, w in parts])
    return WeightedIntegrand(ph, I, w)


def scalar_test_library(grid: Grid, params: CarlemanParams, times) -> dict:
    """Fixed test functions vanishing to first order at ``t = +-T``."""
    times = np.asarray(times, dtype=float)
    eta, _, _ = cutoff_eta(params, times)
    eta2 = (eta**2)[:, None, None, None]
    x, y, z = grid.coords("cell")
    lo, hi = grid.lo, grid.hi
    L = [b - a for a, b in zip(lo, hi)]
    mode = (np.sin(np.pi * (x - lo[0]) / L[0]) * np.sin(np.pi * (y - lo[1]) / L[1])
            * np.sin(np.pi * (z - lo[2]) / L[2]))
    ctr = [0.5 * (a + b) for a, b in zip(lo, hi)]
    R = 0.3 * min(L)
    r2 = (x - ctr[0]) ** 2 + (y - ctr[1]) ** 2 + (z - ctr[2]) ** 2
    bump = np.clip(1 - r2 / R**2, 0, None) ** 4
    tt = times[:, None, None, None]
    return {
        "eigenmode": eta2 * mode * np.cos(tt),
        "bump": eta2 * np.broadcast_to(bump, grid.shape("cell")) * np.cos(2 * tt),
    }


# ---------------------------------------------------------------------------
# Maxwell system

def _collar_violations(grid: Grid, hist, layout) -> list:
    out = []
    for comp, (arr, st) in enumerate(zip(hist, LAYOUTS[layout])):
        mask = grid.collar_mask(st)
        bad = np.abs(arr[:, mask]) > 0
        if bad.any():
            n, j = np.argwhere(bad)[0]
            idx = tuple(int(i) for i in np.argwhere(mask)[j])
            out.append((layout, comp, int(n), idx))
    return out


def _h1_gradients(W, tau, h):
    """Sum of squares of all first space-time differences of ``W`` ``(nt, 3, ...)``."""
    total = np.gradient(W, tau, axis=0, edge_order=2) ** 2
    tsum = total.sum(axis=1)
    gsum = sum((first_derivative(W, h[a], 2 + a) ** 2).sum(axis=1) for a in range(3))
    return tsum, gsum


def verify_maxwell_carleman(grid: Grid, times, D_hist, B_hist, F_hist, G_hist,
                            params: CarlemanParams, s_grid=None) -> tuple[CarlemanReport, CarlemanReport]:
    """Both weighted estimates for a solution ``W = (U, V)`` of the sourced system.

    ``D_hist``/``B_hist`` are staggered histories of ``U``/``V`` and
    ``F_hist``/``G_hist`` the sources at the same levels.  Returns the
    report with the full-gradient boundary term and the one with the
    trace-only boundary functional.
    """
    tau = _check_uniform(times)
    bad = _collar_violations(grid, F_hist, "D") + _collar_violations(grid, G_hist, "B")
    if bad:
        raise ValueError(f"sources nonzero on the collar at {bad[:5]}")
    h = grid.h
    U = to_cells(D_hist, "D")
    V = to_cells(B_hist, "B")
    W = np.concatenate([U, V], axis=1)          # (nt, 6, nx, ny, nz)
    del U, V
    Hs = np.concatenate([to_cells(F_hist, "D"), to_cells(G_hist, "B")], axis=1)
    ph = phi(params, grid.coords("cell"), times)
    w = _time_weights(times)[:, None, None, None] * np.prod(h)
    wt, gs = _h1_gradients(W, tau, h)
    I_grad = WeightedIntegrand(ph, wt + gs, w)
    W2 = (W**2).sum(axis=1)
    I_W = WeightedIntegrand(ph, W2, w)
    h_t, h_g = _h1_gradients(Hs, tau, h)
    I_h = WeightedIntegrand(ph, (Hs**2).sum(axis=1) + h_t + h_g, w)
    H1_sq = float(np.sum((W2 + wt + gs) * w))
    d0 = params.d0

    # full boundary term, from cell data extrapolated to the faces
    phf = _phi_faces(params, grid, times)
    twt = _time_weights(times)[:, None, None]
    Wt = np.gradient(W, tau, axis=0, edge_order=2)
    gW = [first_derivative(W, h[a], 2 + a) for a in range(3)]
    fullG, fullW = [], []
    for face in FACES:
        wf = twt * grid.face_area_weight(face)
        Gf = (_extrap_face(Wt, face) ** 2).sum(1) + sum((_extrap_face(d, face) ** 2).sum(1)
                                                        for d in gW)
        fullG.append((phf[face], Gf, wf))
        fullW.append((phf[face], (_extrap_face(W, face) ** 2).sum(1), wf))
    del Wt, gW
    I_fG, I_fW = _concat(fullG), _concat(fullW)

    # trace-only functional
    tr = extract_traces(grid, times, D_hist, B_hist)
    trG, trW = [], []
    for face in FACES:
        axis = face[0]
        ta, tb = [a for a in range(3) if a != axis]
        wf = twt * grid.face_area_weight(face)
        vt_ = tr.btau[face]                     # (nt, 2, nu, nv)
        un = tr.dnu[face][:, None]               # (nt, 1, nu, nv)
        G = 0.0
        for q in (vt_, un):
            G = G + (np.gradient(q, tau, axis=0, edge_order=2) ** 2).sum(1)
            G = G + (np.gradient(q, h[ta], axis=2, edge_order=2) ** 2).sum(1)
            G = G + (np.gradient(q, h[tb], axis=3, edge_order=2) ** 2).sum(1)
        trG.append((phf[face], G, wf))
        trW.append((phf[face], (vt_**2).sum(1) + un[:, 0] ** 2, wf))
    I_tG, I_tW = _concat(trG), _concat(trW)

    def lhs(s):
        return np.logaddexp(math.log(s) + I_grad.log_value(s), 3 * math.log(s) + I_W.log_value(s))

    def lhs_direct(s):
        return s * I_grad.direct_value(s) + s**3 * I_W.direct_value(s)

    def interior(s):
        return 3 * math.log(s) + 2 * d0 * s + math.log(H1_sq) if H1_sq > 0 else -np.inf

    def full_b(s):
        return np.logaddexp(math.log(s) + I_fG.log_value(s), 3 * math.log(s) + I_fW.log_value(s))

    def trace_b(s):
        return np.logaddexp(math.log(s) + I_tG.log_value(s), 3 * math.log(s) + I_tW.log_value(s))

    sg = _s_grid(params, s_grid)
    checks = [(lhs, lhs_direct), (I_h.log_value, I_h.direct_value)]
    extra = {"d0": d0, "min_phi0": float(np.min(phi(params, grid.coords("cell"), 0.0)))}
    full = _assemble("maxwell_full", sg, lhs,
                     {"source": I_h.log_value, "interior_H1": interior, "boundary": full_b},
                     checks, extra)
    trace = _assemble("maxwell_trace", sg, lhs,
                      {"source": I_h.log_value, "interior_H1": interior, "trace": trace_b},
                      checks, extra)
    return full, trace


# ---------------------------------------------------------------------------
# time-zero estimate

@dataclass
class TimeZeroReport:
    s: np.ndarray
    lhs: float
    rhs: np.ndarray
    holds: np.ndarray
    s_star: float
    s_min: float          # every s >= s_min satisfies the inequality
    failures: int         # violations at s >= s_star
    passed: bool

    def summary(self) -> dict:
        return {"inequality": "time_zero", "lhs": self.lhs, "s_star": self.s_star,
                "s_min": self.s_min, "failures": self.failures, "passed": self.passed}


def verify_time_zero(z, times, grid: Grid, params: CarlemanParams, s_grid=None) -> TimeZeroReport:
    """``int |z(.,0)|^2 <= 2 (s int_Q |z|^2 + s^-1 int_Q |z'|^2)`` with the constant 2."""
    z = np.asarray(z, dtype=float)
    tau = _check_uniform(times)
    times = np.asarray(times, dtype=float)
    n0 = int(np.argmin(np.abs(times)))
    if abs(times[n0]) > 1e-12:
        raise ValueError("time levels must include t = 0")
    wx = np.prod(grid.h)
    wt = _time_weights(times)[:, None, None, None]
    L = float(np.sum(z[n0] ** 2) * wx)
    A = float(np.sum(wt * z**2) * wx)
    zt = np.gradient(z, tau, axis=0, edge_order=2)
    Bv = float(np.sum(wt * zt**2) * wx)
    if s_grid is None:
        s_grid = np.geomspace(params.s_star, 20 * params.s_star, 12)
    s_grid = np.asarray(s_grid, dtype=float)
    rhs = 2.0 * (s_grid * A + Bv / s_grid)
    holds = L <= rhs * (1 + 1e-12)
    disc = L**2 - 16.0 * A * Bv
    if A <= 0:
        s_min = 0.0 if L <= 0 else float("inf")
    elif disc <= 0:
        s_min = 0.0
    else:
        s_min = (L + math.sqrt(disc)) / (4.0 * A)
    fails = int(np.sum(~holds & (s_grid >= params.s_star)))
    return TimeZeroReport(s_grid, L, rhs, holds, params.s_star, s_min, fails, fails == 0)


def time_zero_library(grid: Grid, times, omegas=(1.0, 5.0, 25.0)) -> dict:
    times = np.asarray(times, dtype=float)
    x, y, z = grid.coords("cell")
    lo, hi = grid.lo, grid.hi
    b = np.broadcast_to(np.sin(np.pi * (x - lo[0]) / (hi[0] - lo[0]))
                        * np.sin(np.pi * (y - lo[1]) / (hi[1] - lo[1]))
                        * np.sin(np.pi * (z - lo[2]) / (hi[2] - lo[2])), grid.shape("cell"))
    tt = times[:, None, None, None]
    lib = {"constant": np.ones((len(times),) + grid.shape("cell"))}
    for w in omegas:
        lib[f"cos_{w:g}"] = np.cos(w * tt) * b
    return lib


# ---------------------------------------------------------------------------
# div-curl estimate

def verify_div_curl(u, grid: Grid, params: CarlemanParams, s_grid=None) -> CarlemanReport:
    """``s int e^{2 s phi0} |u|^2`` against ``int e^{2 s phi0} (|curl u|^2 + |div u|^2)``.

    ``u`` is node-collocated with shape ``(3, nx+1, ny+1, nz+1)`` and must
    vanish on every boundary node.
    """
    u = np.asarray(u, dtype=float)
    bnd = np.zeros(grid.shape("node"), dtype=bool)
    for ax in range(3):
        sl = [slice(None)] * 3
        sl[ax] = 0
        bnd[tuple(sl)] = True
        sl[ax] = -1
        bnd[tuple(sl)] = True
    if np.abs(u[:, bnd]).max(initial=0.0) > 0:
        raise ValueError("u must vanish on all boundary nodes")
    h = grid.h
    d = [[first_derivative(u[c], h[a], a) for a in range(3)] for c in range(3)]
    curl = np.stack([d[2][1] - d[1][2], d[0][2] - d[2][0], d[1][0] - d[0][1]])
    div = d[0][0] + d[1][1] + d[2][2]
    ph0 = phi(params, grid.coords("node"), 0.0)
    w = grid.quad_weights("node")
    I_u = WeightedIntegrand(ph0, (u**2).sum(0), w)
    I_c = WeightedIntegrand(ph0, (curl**2).sum(0), w)
    I_d = WeightedIntegrand(ph0, div**2, w)

    def lhs(s):
        return math.log(s) + I_u.log_value(s)

    def lhs_direct(s):
        return s * I_u.direct_value(s)

    return _assemble("div_curl", _s_grid(params, s_grid), lhs,
                     {"curl": I_c.log_value, "div": I_d.log_value},
                     [(lhs, lhs_direct), (I_c.log_value, I_c.direct_value),
                      (I_d.log_value, I_d.direct_value)])


def div_curl_library(grid: Grid) -> dict:
    """Node-collocated gradient and solenoidal bump fields with zero boundary values."""
    x, y, z = grid.mesh("node")
    ctr = [0.5 * (a + b) for a, b in zip(grid.lo, grid.hi)]
    R = 0.3 * min(b - a for a, b in zip(grid.lo, grid.hi))
    dx, dy, dz = x - ctr[0], y - ctr[1], z - ctr[2]
    q = np.clip(1 - (dx**2 + dy**2 + dz**2) / R**2, 0, None)
    f = -8.0 * q**3 / R**2
    grad_p = np.stack([f * dx, f * dy, f * dz])
    # curl of (0, 0, p): (dp/dy, -dp/dx, 0)
    sol = np.stack([f * dy, -f * dx, 0 * f])
    return {"gradient": grad_p, "solenoidal": sol}
