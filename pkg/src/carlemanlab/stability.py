"""Two-experiment linearization, the cross-product minor condition and the
empirical Hölder-stability sweep."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import (LAYOUTS, Grid, ScalarField, cell_to_stagger, curl_edge_to_face,
                   curl_face_to_edge, sobolev_norm_h2, stagger_to_cell)
from .media import CoefficientPair, check_admissible
from .solver import (BoundaryTraceSeries, ForwardRun, InitialDataSet, SourcePair,
                     StaggeredMedia, apply_pec, cfl_dt, run_forward, trace_norm_H)

log = logging.getLogger(__name__)

PAPER_EXAMPLE_ROWS = (2, 3, 4, 9, 10, 12)
TOL_MINOR = 1e-8
_E = np.eye(3)


# ---------------------------------------------------------------------------
# cross-product matrix

@dataclass
class KMatrixBundle:
    """Per-cell 12x6 matrices on the cells outside the collar.

    ``K`` has shape ``(ncell, 12, 6)``; ``cells`` holds the matching cell
    indices.  ``c_star_B`` / ``c_star_D`` are the minima of
    ``sum_k |B0^k|^2`` and ``sum_k |D0^k|^2`` over those cells.
    """

    grid: Grid
    K: np.ndarray = field(repr=False)
    cells: np.ndarray = field(repr=False)
    c_star_B: float = 0.0
    c_star_D: float = 0.0

    @property
    def c_star(self) -> float:
        return min(self.c_star_B, self.c_star_D)


def cross_block(v: np.ndarray) -> np.ndarray:
    """3x3 block with columns ``e_j x v``; ``v`` has shape ``(..., 3)``."""
    cols = [np.cross(np.broadcast_to(_E[j], v.shape), v) for j in range(3)]
    return np.stack(cols, axis=-1)


def k_matrix(B1, D1, B2, D2) -> np.ndarray:
    """Assemble the 12x6 matrix from cell vectors (each ``(..., 3)``)."""
    shape = np.broadcast_shapes(np.shape(B1), np.shape(D1), np.shape(B2), np.shape(D2))[:-1]
    K = np.zeros(shape + (12, 6))
    K[..., 0:3, 0:3] = cross_block(np.asarray(B1, dtype=float))
    K[..., 3:6, 3:6] = cross_block(np.asarray(D1, dtype=float))
    K[..., 6:9, 0:3] = cross_block(np.asarray(B2, dtype=float))
    K[..., 9:12, 3:6] = cross_block(np.asarray(D2, dtype=float))
    return K


def _cell_vectors(vf) -> np.ndarray:
    return np.stack([stagger_to_cell(a, st) for a, st in zip(vf.arrays, LAYOUTS[vf.layout])],
                    axis=-1)


def assemble_K(ids: InitialDataSet) -> KMatrixBundle:
    g = ids.grid
    mask = ids.interior_mask if ids.interior_mask is not None else ~g.collar_mask("cell")
    B1, B2 = (_cell_vectors(b)[mask] for b in ids.B0)
    D1, D2 = (_cell_vectors(d)[mask] for d in ids.D0)
    K = k_matrix(B1, D1, B2, D2)
    sB = (B1**2).sum(-1) + (B2**2).sum(-1)
    sD = (D1**2).sum(-1) + (D2**2).sum(-1)
    return KMatrixBundle(g, K, np.argwhere(mask),
                         float(sB.min()) if sB.size else 0.0,
                         float(sD.min()) if sD.size else 0.0)


@dataclass
class MinorReport:
    rows: tuple
    passed: bool
    min_abs_det: float
    max_abs_det: float
    failures: list
    best_rows: tuple
    best_abs_det: float
    tol: float = TOL_MINOR


def check_minor(bundle: KMatrixBundle, rows=PAPER_EXAMPLE_ROWS, tol: float = TOL_MINOR,
                probe: int | None = None) -> MinorReport:
    """Determinant of the chosen 6x6 minor (1-based ``rows``) at every cell.

    Also scans all 924 row sets at a probe cell (default: the middle of the
    list) and reports the one with the largest ``|det|``.
    """
    rows = tuple(int(r) for r in rows)
    if len(rows) != 6 or len(set(rows)) != 6 or not all(1 <= r <= 12 for r in rows):
        raise ValueError(f"rows must be 6 distinct indices in 1..12, got {rows}")
    K = bundle.K
    if K.shape[0] == 0:
        return MinorReport(rows, False, 0.0, 0.0, [], rows, 0.0, tol)
    sub = K[:, [r - 1 for r in rows], :]
    det = np.abs(np.linalg.det(sub))
    bad = np.nonzero(det <= tol)[0]
    failures = [tuple(int(i) for i in bundle.cells[b]) for b in bad[:50]]
    p = K.shape[0] // 2 if probe is None else probe
    best, best_rows = -1.0, rows
    for combo in itertools.combinations(range(12), 6):
        d = abs(float(np.linalg.det(K[p][list(combo)])))
        if d > best + 1e-14:
            best, best_rows = d, tuple(c + 1 for c in combo)
    return MinorReport(rows, bool(len(bad) == 0), float(det.min()), float(det.max()),
                       failures, best_rows, best, tol)


# ---------------------------------------------------------------------------
# perturbations

@dataclass(frozen=True)
class BumpShape:
    """``peak * (1 - |x-c|^2/R^2)_+^4`` with its exact gradient."""

    center: tuple
    radius: float
    peak: float = 1.0

    def __call__(self, x, y, z):
        c, R = self.center, self.radius
        q = np.clip(1 - ((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2) / R**2, 0, None)
        return self.peak * q**4

    def grad(self, x, y, z):
        c, R = self.center, self.radius
        q = np.clip(1 - ((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2) / R**2, 0, None)
        f = -8.0 * self.peak * q**3 / R**2
        return (f * (x - c[0]), f * (y - c[1]), f * (z - c[2]))

    def sample(self, grid: Grid, stagger: str = "cell") -> np.ndarray:
        return np.broadcast_to(self(*grid.mesh(stagger)), grid.shape(stagger)).copy()

    def support_distance(self, grid: Grid) -> float:
        """Distance from the support to the box boundary."""
        return min(min(c - lo, hi - c) for c, lo, hi in zip(self.center, grid.lo, grid.hi)) \
            - self.radius


class ZeroShape:
    def __call__(self, x, y, z):
        return 0.0 * (x + y + z)

    def grad(self, x, y, z):
        z0 = self(x, y, z)
        return (z0, z0, z0)

    def sample(self, grid: Grid, stagger: str = "cell") -> np.ndarray:
        return np.zeros(grid.shape(stagger))


def default_shapes(grid: Grid, peak: float = 0.2, radius: float = 0.11):
    """Two disjoint bumps in the interior: one for ``mu``, one for ``lam``."""
    lo, hi = np.asarray(grid.lo), np.asarray(grid.hi)
    L = hi - lo
    c_mu = tuple(lo + L * np.array([0.45, 0.38, 0.5]))
    c_lam = tuple(lo + L * np.array([0.45, 0.62, 0.5]))
    r = radius * float(L.min())
    return BumpShape(c_mu, r, peak), BumpShape(c_lam, r, peak)


def perturbed_pair(base: CoefficientPair, d_mu, d_lam, t: float) -> CoefficientPair:
    g = base.grid
    return base.with_fields(base.mu.data + t * d_mu.sample(g), base.lam.data + t * d_lam.sample(g))


# ---------------------------------------------------------------------------
# linearized sources

class TandemSources(SourcePair):
    """``f = curl(mu_diff B2)``, ``g = -curl(lam_diff D2)`` from a background run.

    The background (pair 2, no sources) is advanced in lockstep with the
    consumer so no history is stored.  It replays exactly the arithmetic of
    :func:`carlemanlab.solver.run_forward`, hence ``f`` is evaluated with
    the half-step ``B2`` and ``g`` with the integer-step ``D2``.
    """

    carleman_compatible = True

    def __init__(self, grid: Grid, mu_diff: np.ndarray, lam_diff: np.ndarray,
                 media2: StaggeredMedia, D2_0, B2_0):
        self.grid = grid
        self.mu_diff = np.asarray(mu_diff, dtype=float)
        self.lam_diff = np.asarray(lam_diff, dtype=float)
        self.mu_diff_face = tuple(cell_to_stagger(self.mu_diff, s) for s in LAYOUTS["B"])
        self.lam_diff_edge = tuple(cell_to_stagger(self.lam_diff, s) for s in LAYOUTS["D"])
        self.media2 = media2
        self.D2_0 = tuple(np.array(a, dtype=float) for a in D2_0)
        self.B2_0 = tuple(np.array(a, dtype=float) for a in B2_0)
        self.zero = not (self.mu_diff.any() or self.lam_diff.any())

    def directional(self, sign: int) -> "_TandemStream":
        return _TandemStream(self)

    # stateless evaluation at t = 0 only (used by identity checks)
    def f0(self):
        return curl_face_to_edge(*(m * b for m, b in zip(self.mu_diff_face, self.B2_0)),
                                 self.grid.h)

    def g0(self):
        return tuple(-a for a in curl_edge_to_face(
            *(l * d for l, d in zip(self.lam_diff_edge, self.D2_0)), self.grid.h))


class _TandemStream(SourcePair):
    carleman_compatible = True

    def __init__(self, parent: TandemSources):
        self.p = parent
        self.D = tuple(a.copy() for a in parent.D2_0)
        self.B = tuple(a.copy() for a in parent.B2_0)
        apply_pec(self.D, self.B)
        self.t = 0.0
        self.B_half = None
        self.t_half = None
        self._g_cache = (0.0, None)

    def _g_now(self):
        if self._g_cache[0] == self.t and self._g_cache[1] is not None:
            return self._g_cache[1]
        h = self.p.grid.h
        g = tuple(-a for a in curl_edge_to_face(
            *(l * d for l, d in zip(self.p.lam_diff_edge, self.D)), h))
        self._g_cache = (self.t, g)
        return g

    def g(self, t):
        if self.p.zero:
            return None
        if math.isclose(t, self.t, rel_tol=0, abs_tol=1e-12):
            return self._g_now()
        if self.t_half is None:
            raise RuntimeError("tandem sources queried out of order")
        self._advance_to(t)
        return self._g_now()

    def f(self, t):
        if self.p.zero:
            return None
        m = self.p.media2
        h = self.p.grid.h
        dt = 2.0 * (t - self.t)
        c = curl_edge_to_face(*(l * d for l, d in zip(m.lam_edge, self.D)), h)
        self.B_half = tuple(b - 0.5 * dt * ci for b, ci in zip(self.B, c))
        self.t_half = t
        return curl_face_to_edge(*(mu * b for mu, b in zip(self.p.mu_diff_face, self.B_half)), h)

    def _advance_to(self, t):
        m = self.p.media2
        h = self.p.grid.h
        dt = 2.0 * (self.t_half - self.t)
        B = self.B_half
        c = curl_face_to_edge(*(mu * b for mu, b in zip(m.mu_face, B)), h)
        D = tuple(d + dt * ci for d, ci in zip(self.D, c))
        apply_pec(D, B)
        c2 = curl_edge_to_face(*(l * d for l, d in zip(m.lam_edge, D)), h)
        B = tuple(b - 0.5 * dt * ci for b, ci in zip(B, c2))
        apply_pec(D, B)
        self.D, self.B, self.t = D, B, t
        self.t_half = None


def linearized_sources(grid: Grid, mu_diff, lam_diff, media2, D2_0, B2_0) -> TandemSources:
    """Sources of the linearized system driven by the pair-2 background."""
    mu_diff = mu_diff.data if isinstance(mu_diff, ScalarField) else np.asarray(mu_diff)
    lam_diff = lam_diff.data if isinstance(lam_diff, ScalarField) else np.asarray(lam_diff)
    collar = grid.collar_mask("cell")
    bad = np.argwhere(collar & ((mu_diff != 0) | (lam_diff != 0)))
    if len(bad):
        raise ValueError("coefficient difference nonzero on the collar at cells "
                         f"{[tuple(int(v) for v in b) for b in bad[:5]]}")
    m2 = media2 if isinstance(media2, StaggeredMedia) else StaggeredMedia.from_pair(media2)
    D2_0 = getattr(D2_0, "arrays", D2_0)
    B2_0 = getattr(B2_0, "arrays", B2_0)
    return TandemSources(grid, mu_diff, lam_diff, m2, D2_0, B2_0)


# ---------------------------------------------------------------------------
# linearized runs

@dataclass
class LinearizedRun:
    """Observation of ``W_k`` for one experiment in the requested modes.

    ``traces[mode]`` are boundary traces of ``(U_k, V_k)``; ``runs`` keeps
    the underlying forward runs (histories only if requested).
    """

    k: int
    traces: dict
    runs: dict
    discrepancy: dict

    def observation(self, mode: str = "direct") -> float:
        tr = self.traces[mode]
        return trace_norm_H(tr, "Btau") + trace_norm_H(tr, "Dnu")


def _history_diff(a: ForwardRun, b: ForwardRun):
    if a.D_hist is None or b.D_hist is None:
        return None, None
    return (tuple(x - y for x, y in zip(a.D_hist, b.D_hist)),
            tuple(x - y for x, y in zip(a.B_hist, b.B_hist)))


def run_linearized(cp1: CoefficientPair, cp2: CoefficientPair, ids: InitialDataSet, T: float,
                   dt: float | None = None, modes=("direct", "linearized"), stride: int = 1,
                   keep_history: bool = False, admissibility: tuple | None = None,
                   safety: float = 0.9, background: dict | None = None) -> list:
    """Observation differences ``W_k`` for ``k = 1, 2``.

    Modes: ``direct`` subtracts two full runs; ``linearized`` solves the
    difference system with ``mu_1, lam_1`` and sources from the pair-2
    background; ``frechet`` solves the same system with ``mu_2, lam_2``,
    i.e. the derivative of the forward map, whose distance to ``direct`` is
    quadratic in the perturbation.  ``admissibility = (x0, rho)`` checks both
    pairs first.  ``background`` may cache pair-2 runs across calls.
    """
    g = cp1.grid
    for name in modes:
        if name not in ("direct", "linearized", "frechet"):
            raise ValueError(f"unknown mode {name!r}")
    collar = g.collar_mask("cell")
    if (np.abs(cp1.mu.data - cp2.mu.data)[collar].max(initial=0) > 0
            or np.abs(cp1.lam.data - cp2.lam.data)[collar].max(initial=0) > 0):
        raise ValueError("the two coefficient pairs differ on the collar")
    if admissibility is not None:
        x0, rho = admissibility
        for i, cp in ((1, cp1), (2, cp2)):
            rep = check_admissible(cp, x0, rho)
            if not rep.passed:
                failed = [k for k, v in rep.conditions.items() if not v["passed"]]
                raise ValueError(f"pair {i} not admissible: {failed}")
    m1 = StaggeredMedia.from_pair(cp1)
    m2 = StaggeredMedia.from_pair(cp2)
    if dt is None:
        dt = min(cfl_dt(g, m1, safety), cfl_dt(g, m2, safety))
    mu_diff = cp1.mu.data - cp2.mu.data
    lam_diff = cp1.lam.data - cp2.lam.data
    zeros = (tuple(np.zeros(g.shape(s)) for s in LAYOUTS["D"]),
             tuple(np.zeros(g.shape(s)) for s in LAYOUTS["B"]))
    kw = dict(stride=stride, keep_history=keep_history, diagnostics=False)
    out = []
    for k in range(2):
        D0, B0 = ids.D0[k], ids.B0[k]
        runs, traces = {}, {}
        if "direct" in modes:
            r1 = run_forward(g, m1, D0, B0, T, dt=dt, **kw)
            key = (k, dt, T, stride, keep_history)
            if background is not None and key in background:
                r2 = background[key]
            else:
                r2 = run_forward(g, m2, D0, B0, T, dt=dt, **kw)
                if background is not None:
                    background[key] = r2
            traces["direct"] = r1.traces - r2.traces
            Dd, Bd = _history_diff(r1, r2)
            runs["direct"] = ForwardRun(g, r1.dt, r1.nsteps, r1.times, Dd, Bd,
                                        traces["direct"], r1.step_times, np.array([]),
                                        np.array([]), np.array([]), 0.0)
        src = linearized_sources(g, mu_diff, lam_diff, m2, D0.arrays, B0.arrays)
        for mode, media in (("linearized", m1), ("frechet", m2)):
            if mode in modes:
                r = run_forward(g, media, *zeros, T, dt=dt, sources=src, **kw)
                runs[mode] = r
                traces[mode] = r.traces
        disc = {}
        if "direct" in traces:
            for mode in ("linearized", "frechet"):
                if mode in traces:
                    diff = traces["direct"] - traces[mode]
                    disc[mode] = trace_norm_H(diff, "both")
        out.append(LinearizedRun(k, traces, runs, disc))
    return out


# ---------------------------------------------------------------------------
# initial identity

@dataclass
class InitialIdentityReport:
    k: int
    discrete_mismatch: float      # vs the discrete curls
    analytic_mismatch: float      # vs grad(mu) x B0 and -grad(lam) x D0 at sample points
    scale: float
    product_rule_defect: float    # |curl(mu B0) - mu curl B0 - grad mu x B0|, discrete


def _l2(grid, arrays, layout):
    return math.sqrt(sum(float(np.sum(a * a * grid.quad_weights(st)))
                         for a, st in zip(arrays, LAYOUTS[layout])))


def check_initial_identity(run: ForwardRun, ids: InitialDataSet, k: int, d_mu, d_lam,
                           t_amp: float = 1.0) -> InitialIdentityReport:
    """Centred time derivative of ``W_k`` at ``t = 0`` versus the source curls.

    ``d_mu``/``d_lam`` are shapes with exact gradients and ``t_amp`` their
    amplitude.  In the region where ``B0``/``D0`` are constant the
    continuum value is ``grad(mu) x B0`` (resp. ``-grad(lam) x D0``).
    """
    if run.D_hist is None or len(run.times) < 3:
        raise ValueError("identity check needs a stored history with levels around t = 0")
    g = run.grid
    n0 = run.level(0.0)
    if n0 == 0 or n0 == len(run.times) - 1 or abs(run.times[n0]) > 1e-12:
        raise ValueError("history must contain t = 0 and both neighbouring levels")
    tau = float(run.times[n0 + 1] - run.times[n0])
    dU = tuple((a[n0 + 1] - a[n0 - 1]) / (2 * tau) for a in run.D_hist)
    dV = tuple((a[n0 + 1] - a[n0 - 1]) / (2 * tau) for a in run.B_hist)
    mu_diff = t_amp * d_mu.sample(g)
    lam_diff = t_amp * d_lam.sample(g)
    mu_f = tuple(cell_to_stagger(mu_diff, s) for s in LAYOUTS["B"])
    lam_e = tuple(cell_to_stagger(lam_diff, s) for s in LAYOUTS["D"])
    B0, D0 = ids.B0[k].arrays, ids.D0[k].arrays
    f0 = curl_face_to_edge(*(m * b for m, b in zip(mu_f, B0)), g.h)
    g0 = tuple(-a for a in curl_edge_to_face(*(l * d for l, d in zip(lam_e, D0)), g.h))
    disc = math.hypot(_l2(g, [a - b for a, b in zip(dU, f0)], "D"),
                      _l2(g, [a - b for a, b in zip(dV, g0)], "B"))
    # continuum comparison on the region where the initial data are constant
    interior = [~g.collar_mask(st) for st in LAYOUTS["D"]]
    interior_f = [~g.collar_mask(st) for st in LAYOUTS["B"]]
    B0c = _constant_value(ids.B0[k])
    D0c = _constant_value(ids.D0[k])
    an_U, an_V = [], []
    for i, st in enumerate(LAYOUTS["D"]):
        gm = d_mu.grad(*g.mesh(st))
        cr = np.cross(np.stack(np.broadcast_arrays(*gm), -1), B0c)[..., i] * t_amp
        an_U.append(np.where(interior[i], dU[i] - cr, 0.0))
    for i, st in enumerate(LAYOUTS["B"]):
        gl = d_lam.grad(*g.mesh(st))
        cr = -np.cross(np.stack(np.broadcast_arrays(*gl), -1), D0c)[..., i] * t_amp
        an_V.append(np.where(interior_f[i], dV[i] - cr, 0.0))
    analytic = math.hypot(_l2(g, an_U, "D"), _l2(g, an_V, "B"))
    # discrete product rule: curl(mu B) - mu curl B - grad(mu) x B, on edges
    mu_e = tuple(cell_to_stagger(mu_diff, s) for s in LAYOUTS["D"])
    cB = curl_face_to_edge(*B0, g.h)
    prod = []
    for i, st in enumerate(LAYOUTS["D"]):
        gm = np.stack(np.broadcast_arrays(*d_mu.grad(*g.mesh(st))), -1) * t_amp
        cr = np.cross(gm, B0c)[..., i]
        prod.append(np.where(interior[i], f0[i] - mu_e[i] * cB[i] - cr, 0.0))
    scale = math.hypot(_l2(g, f0, "D"), _l2(g, g0, "B"))
    return InitialIdentityReport(k, disc, analytic, scale, _l2(g, prod, "D"))


def _constant_value(vf) -> np.ndarray:
    """Value of a field on the cells outside the collar (assumed constant there)."""
    g = vf.grid
    mask = ~g.collar_mask("cell")
    v = _cell_vectors(vf)[mask]
    return v.mean(axis=0) if len(v) else np.zeros(3)


# ---------------------------------------------------------------------------
# Hölder fit and sweep

@dataclass
class HolderFit:
    kappa_hat: float
    C_fit: float         # OLS intercept
    C_hat: float         # smallest C with N <= C E^kappa_hat at every point
    residual: float      # RMS of log-space residuals
    kappa_stderr: float


def fit_holder(E, N) -> HolderFit:
    """OLS of ``log N = kappa log E + log C``."""
    E = np.asarray(E, dtype=float)
    N = np.asarray(N, dtype=float)
    keep = (E > 0) & (N > 0)
    E, N = E[keep], N[keep]
    if len(E) < 3:
        raise ValueError(f"need >= 3 points with E > 0, got {len(E)}")
    x, y = np.log(E), np.log(N)
    if np.ptp(x) == 0:
        raise ValueError("degenerate fit: all E equal")
    A = np.vstack([x, np.ones_like(x)]).T
    (kappa, logC), *_ = np.linalg.lstsq(A, y, rcond=None)
    r = y - (kappa * x + logC)
    dof = max(len(x) - 2, 1)
    s2 = float(r @ r) / dof
    se = math.sqrt(s2 / float(((x - x.mean()) ** 2).sum()))
    C_hat = float(np.max(N / E**kappa))
    return HolderFit(float(kappa), float(math.exp(logC)), C_hat,
                     float(np.sqrt(np.mean(r**2))), se)


@dataclass
class StabilityReport:
    amplitudes: np.ndarray
    N: np.ndarray
    E: np.ndarray
    kappa_running: np.ndarray
    fit: HolderFit | None
    monotone: bool
    dropped: list
    minor: MinorReport | None = None
    c_star: float = float("nan")
    inequality_holds: bool = False
    mode_discrepancy: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "kappa_hat": self.fit.kappa_hat if self.fit else None,
            "kappa_stderr": self.fit.kappa_stderr if self.fit else None,
            "C_hat": self.fit.C_hat if self.fit else None,
            "C_fit": self.fit.C_fit if self.fit else None,
            "fit_residual": self.fit.residual if self.fit else None,
            "minor_min": self.minor.min_abs_det if self.minor else None,
            "c_star": self.c_star,
            "monotone": self.monotone,
            "inequality_holds": self.inequality_holds,
            "dropped": self.dropped,
        }

    def write_csv(self, path, header: str = "") -> None:
        with open(path, "w") as fh:
            if header:
                fh.write(header.rstrip("\n") + "\n")
            fh.write("t,N,E,kappa_running\n")
            for t, n, e, k in zip(self.amplitudes, self.N, self.E, self.kappa_running):
                fh.write(f"{t:.12g},{n:.12e},{e:.12e},{k:.12e}\n")


def coefficient_norm(cp1: CoefficientPair, cp2: CoefficientPair) -> float:
    g = cp1.grid
    n_mu, _ = sobolev_norm_h2(ScalarField(g, "cell", cp1.mu.data - cp2.mu.data))
    n_lam, _ = sobolev_norm_h2(ScalarField(g, "cell", cp1.lam.data - cp2.lam.data))
    return n_mu + n_lam


def stability_sweep(base: CoefficientPair, shapes, amplitudes, ids: InitialDataSet, T: float,
                    x0=None, rho: float | None = None, dt: float | None = None,
                    safety: float = 0.9, mode: str = "direct", noise: float = 0.0,
                    seed: int = 0, rows=PAPER_EXAMPLE_ROWS) -> StabilityReport:
    """Coefficient-difference norm ``N`` versus observation norm ``E`` over amplitudes.

    ``E(t) = sum_k (||(B_1^k - B_2^k)_tau|| + ||(D_1^k - D_2^k)_nu||)`` in the
    observation norm.  Amplitudes whose perturbed pair is not admissible
    (when ``x0``/``rho`` are given) are dropped with a warning.
    ``noise`` adds seeded Gaussian noise (relative to the trace RMS).
    """
    d_mu, d_lam = shapes
    g = base.grid
    rng = np.random.default_rng(seed)
    bundle = assemble_K(ids)
    minor = check_minor(bundle, rows)
    m_base = StaggeredMedia.from_pair(base)
    if dt is None:
        # one step for all amplitudes so the pair-2 runs can be shared
        peak = max(float(np.max(d_mu.sample(g))), float(np.max(d_lam.sample(g))))
        cmax = float(np.max((base.mu.data + max(amplitudes) * d_mu.sample(g))
                            * (base.lam.data + max(amplitudes) * d_lam.sample(g))))
        dt = safety * min(g.h) / (math.sqrt(3.0) * math.sqrt(max(cmax, 1e-300)))
        dt = min(dt, cfl_dt(g, m_base, safety)) if peak >= 0 else dt
    amps, Ns, Es, dropped, disc = [], [], [], [], {}
    cache: dict = {}
    for t in amplitudes:
        t = float(t)
        if t == 0.0:
            continue
        cp1 = perturbed_pair(base, d_mu, d_lam, t)
        if x0 is not None and rho is not None:
            rep = check_admissible(cp1, x0, rho)
            if not rep.passed:
                failed = [k for k, v in rep.conditions.items() if not v["passed"]]
                log.warning("amplitude %g dropped: conditions %s fail", t, failed)
                dropped.append(t)
                continue
        runs = run_linearized(cp1, base, ids, T, dt=dt, modes=(mode,), background=cache)
        E = 0.0
        for lr in runs:
            tr = lr.traces[mode]
            if noise > 0:
                tr = _add_noise(tr, noise, rng)
            E += trace_norm_H(tr, "Btau") + trace_norm_H(tr, "Dnu")
        amps.append(t)
        Ns.append(coefficient_norm(cp1, base))
        Es.append(E)
    amps, Ns, Es = np.array(amps), np.array(Ns), np.array(Es)
    order = np.argsort(amps)
    amps, Ns, Es = amps[order], Ns[order], Es[order]
    kr = np.full(len(amps), np.nan)
    for i in range(1, len(amps)):
        if Es[i] > 0 and Es[i - 1] > 0 and Es[i] != Es[i - 1]:
            kr[i] = math.log(Ns[i] / Ns[i - 1]) / math.log(Es[i] / Es[i - 1])
    fit = fit_holder(Es, Ns) if np.count_nonzero(Es > 0) >= 3 else None
    monotone = bool(len(Es) > 1 and np.all(np.diff(Es) > 0))
    holds = bool(fit is not None and np.all(Ns <= fit.C_hat * Es**fit.kappa_hat * (1 + 1e-12)))
    return StabilityReport(amps, Ns, Es, kr, fit, monotone, dropped, minor, bundle.c_star,
                           holds, disc)


def _add_noise(tr: BoundaryTraceSeries, level: float, rng) -> BoundaryTraceSeries:
    faces = sorted(tr.btau)
    rms = math.sqrt(np.mean([np.mean(tr.btau[f] ** 2) for f in faces]
                            + [np.mean(tr.dnu[f] ** 2) for f in faces]))
    sig = level * rms
    return BoundaryTraceSeries(
        tr.grid, tr.times,
        {f: tr.btau[f] + sig * rng.standard_normal(tr.btau[f].shape) for f in faces},
        {f: tr.dnu[f] + sig * rng.standard_normal(tr.dnu[f].shape) for f in faces})


# ---------------------------------------------------------------------------
# input for the weighted Maxwell estimates

@dataclass
class SourcedRun:
    """A linearized solution ``W_k`` with the sources sampled at its stored levels."""

    run: ForwardRun
    F_hist: tuple
    G_hist: tuple


def sourced_linearized_run(cp1: CoefficientPair, cp2: CoefficientPair, ids: InitialDataSet,
                           k: int, T: float, dt: float | None = None, stride: int = 1,
                           safety: float = 0.9) -> SourcedRun:
    """Solve the difference system for experiment ``k`` and record ``f, g`` per level.

    The sources at a stored level are ``curl(mu_diff B2)`` and
    ``-curl(lam_diff D2)`` of the background run at that level.
    """
    g = cp1.grid
    m1 = StaggeredMedia.from_pair(cp1)
    m2 = StaggeredMedia.from_pair(cp2)
    if dt is None:
        dt = min(cfl_dt(g, m1, safety), cfl_dt(g, m2, safety))
    D0, B0 = ids.D0[k], ids.B0[k]
    src = linearized_sources(g, cp1.mu.data - cp2.mu.data, cp1.lam.data - cp2.lam.data,
                             m2, D0.arrays, B0.arrays)
    zeros = (tuple(np.zeros(g.shape(s)) for s in LAYOUTS["D"]),
             tuple(np.zeros(g.shape(s)) for s in LAYOUTS["B"]))
    run = run_forward(g, m1, *zeros, T, dt=dt, sources=src, stride=stride, diagnostics=False)
    bg = run_forward(g, m2, D0, B0, T, dt=dt, stride=stride, traces=False, diagnostics=False)
    nt = len(bg.times)
    F = tuple(np.empty((nt,) + g.shape(s)) for s in LAYOUTS["D"])
    G = tuple(np.empty((nt,) + g.shape(s)) for s in LAYOUTS["B"])
    for n in range(nt):
        Bn = tuple(a[n] for a in bg.B_hist)
        Dn = tuple(a[n] for a in bg.D_hist)
        f = curl_face_to_edge(*(m * b for m, b in zip(src.mu_diff_face, Bn)), g.h)
        gg = curl_edge_to_face(*(l * d for l, d in zip(src.lam_diff_edge, Dn)), g.h)
        for i in range(3):
            F[i][n] = f[i]
            G[i][n] = -gg[i]
    del bg
    return SourcedRun(run, F, G)
